use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

/// Provenance of one run. Kept apart from the result files so those stay
/// byte-identical across repeated runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub input: String,
    pub overrides: BTreeMap<&'static str, serde_json::Value>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub tool_version: &'static str,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &'static str, input: &Path, threads: usize) -> Self {
        Self {
            command,
            input: input.display().to_string(),
            overrides: BTreeMap::new(),
            seed: None,
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION"),
            threads,
            wall_clock_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn set<T: Serialize>(&mut self, flag: &'static str, value: Option<T>) {
        if let Some(v) = value {
            self.overrides.insert(
                flag,
                serde_json::to_value(v).expect("flag values serialize"),
            );
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, out: Option<&Path>) -> std::io::Result<()> {
        if let Some(t) = self.started.take() {
            self.wall_clock_seconds = t.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        match out {
            Some(p) => std::fs::write(manifest_path(p), text + "\n"),
            None => {
                eprintln!("{text}");
                Ok(())
            }
        }
    }
}

/// `<out>.manifest.json`, next to the result file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
