use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mrvi_core::diffusion::{
    build_chain, run_parabolic_rvi, run_parabolic_vi, solve_discretized, DiffusionModel,
    DiscretizedProblem, GridSpec, RviMode,
};
use mrvi_core::mc::{
    chain_identity_check, sde_growth_estimate, sde_martingale_check, GridPolicy, McConfig,
};
use mrvi_core::oracle::enumerate_min;
use mrvi_core::{
    load_diffusion, load_model, solve_rvi, solve_vi, validate, ChainModel, Error, SolveReport,
    SolverConfig, ValueFunction, Violation,
};
use serde::Serialize;
use thiserror::Error;

use crate::manifest::RunManifest;
use crate::{CheckArg, Cli, Command, InputArgs, McArgs, PdeArgs, SolveArgs, SolverArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::OracleNotConverged { .. }
            | Error::SolverNotConverged { .. }
            | Error::Overflow { .. }
            | Error::Underflow { .. }
            | Error::NegativeIterate { .. } => CliError::NotConverged(msg),
            _ => CliError::Invalid(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

enum Problem {
    Chain(ChainModel),
    Diffusion(DiffusionModel, GridSpec),
}

fn read_input(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn problem_kind(text: &str) -> CliResult<String> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Invalid(format!("malformed problem document: {e}")))?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some(k @ ("chain" | "diffusion")) => Ok(k.to_string()),
        Some(other) => Err(CliError::Invalid(format!("unknown problem type {other:?}"))),
        None => Err(CliError::Invalid(
            "problem document has no \"type\" field".into(),
        )),
    }
}

fn load_problem(path: &Path) -> CliResult<Problem> {
    let text = read_input(path)?;
    Ok(match problem_kind(&text)?.as_str() {
        "chain" => Problem::Chain(load_model(text.as_bytes())?),
        _ => {
            let (m, g) = load_diffusion(text.as_bytes())?;
            Problem::Diffusion(m, g)
        }
    })
}

fn load_diffusion_only(path: &Path, command: &str) -> CliResult<(DiffusionModel, GridSpec)> {
    match load_problem(path)? {
        Problem::Diffusion(m, g) => Ok((m, g)),
        Problem::Chain(_) => Err(CliError::Invalid(format!(
            "{command} needs a diffusion problem"
        ))),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Writes a result to `--out` or stdout and records it in the manifest.
fn emit(manifest: &mut RunManifest, out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            write_file(p, text)?;
            manifest.output(p);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("results serialize") + "\n"
}

fn solver_config(args: &SolverArgs, manifest: &mut RunManifest) -> SolverConfig {
    manifest.set("tol", args.tol);
    manifest.set("max_iter", args.max_iter);
    manifest.set("x0", args.x0);
    if args.log_space {
        manifest.set("log_space", Some(true));
    }
    let mut cfg = SolverConfig::default().with_log_space(args.log_space);
    if let Some(t) = args.tol {
        cfg = cfg.with_tol(t);
    }
    if let Some(n) = args.max_iter {
        cfg = cfg.with_max_iter(n);
    }
    if let Some(x) = args.x0 {
        cfg = cfg.with_x0(x);
    }
    cfg
}

fn discretize(
    model: &DiffusionModel,
    spec: &GridSpec,
    solver: &SolverArgs,
) -> CliResult<DiscretizedProblem> {
    if solver.x0.is_some() {
        eprintln!(
            "note: --x0 is ignored for diffusion problems; the origin node is the reference state"
        );
    }
    Ok(build_chain(model, spec)?)
}

pub fn run(cli: Cli) -> CliResult<u8> {
    if cli.threads == 0 {
        return Err(CliError::Invalid("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    match cli.command {
        Command::Validate(args) => run_validate(args, cli.threads),
        Command::Solve(args) => run_solve(args, cli.threads),
        Command::Oracle(args) => run_oracle(args, cli.threads),
        Command::Discretize(args) => run_discretize(args, cli.threads),
        Command::Pde(args) => run_pde(args, cli.threads),
        Command::Mc(args) => run_mc(args, cli.threads),
    }
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    kind: String,
    n_states: Option<usize>,
    n_actions: Option<usize>,
    violations: Vec<Violation>,
    errors: Vec<String>,
}

fn run_validate(args: InputArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("validate", &args.input, threads);
    let text = read_input(&args.input)?;
    let kind = problem_kind(&text)?;
    let mut report = ValidationReport {
        valid: true,
        kind: kind.clone(),
        n_states: None,
        n_actions: None,
        violations: Vec::new(),
        errors: Vec::new(),
    };
    let chain = if kind == "chain" {
        match load_model(text.as_bytes()) {
            Ok(m) => Some(m),
            Err(Error::InvalidModel(v)) => {
                report.violations = v;
                None
            }
            Err(e) => {
                report.errors.push(e.to_string());
                None
            }
        }
    } else {
        match load_diffusion(text.as_bytes()).and_then(|(m, g)| build_chain(&m, &g)) {
            Ok(p) => Some(p.chain),
            Err(e) => {
                report.errors.push(e.to_string());
                None
            }
        }
    };
    if let Some(c) = &chain {
        report.n_states = Some(c.n_states());
        report.n_actions = Some(c.n_actions());
        report.violations = validate(c);
    }
    report.valid = report.violations.is_empty() && report.errors.is_empty();
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    for e in &report.errors {
        eprintln!("error: {e}");
    }
    emit(&mut manifest, args.out.as_deref(), &to_json(&report))?;
    manifest
        .finish(args.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(if report.valid { 0 } else { 1 })
}

#[derive(Serialize)]
struct DiffusionSolveOutput<'a> {
    /// `log(lambda_est) / dt`.
    rate: f64,
    dt: f64,
    origin: usize,
    report: &'a SolveReport,
}

fn run_solve(args: SolveArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("solve", &args.io.input, threads);
    let mut cfg = solver_config(&args.solver, &mut manifest);
    manifest.set("lambda", args.lambda);
    let problem = load_problem(&args.io.input)?;
    let (report, text) = match problem {
        Problem::Chain(model) => {
            let report = match args.lambda {
                Some(l) => solve_vi(&model, &cfg.with_lambda(l))?,
                None => solve_rvi(&model, &cfg)?,
            };
            let text = to_json(&report);
            (report, text)
        }
        Problem::Diffusion(model, spec) => {
            if args.lambda.is_some() {
                return Err(CliError::Invalid(
                    "--lambda with a diffusion problem: use `pde --lambda` for parabolic value iteration".into(),
                ));
            }
            let p = discretize(&model, &spec, &args.solver)?;
            cfg = cfg.with_x0(p.origin);
            let report = solve_rvi(&p.chain, &cfg)?;
            let text = to_json(&DiffusionSolveOutput {
                rate: p.rate_from_eigenvalue(report.lambda_est),
                dt: p.dt,
                origin: p.origin,
                report: &report,
            });
            (report, text)
        }
    };
    emit(&mut manifest, args.io.out.as_deref(), &text)?;
    if let Some(t) = &args.trace {
        write_file(t, &report.trace_csv())?;
        manifest.output(t);
    }
    manifest
        .finish(args.io.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    if report.converged {
        Ok(0)
    } else {
        eprintln!(
            "error: {} did not converge after {} iterations{}",
            if args.lambda.is_some() {
                "value iteration"
            } else {
                "relative value iteration"
            },
            report.iterations,
            if report.diverged {
                " (iterates left the representable window)"
            } else {
                ""
            }
        );
        Ok(2)
    }
}

fn run_oracle(args: InputArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("oracle", &args.input, threads);
    let chain = match load_problem(&args.input)? {
        Problem::Chain(m) => m,
        Problem::Diffusion(m, g) => build_chain(&m, &g)?.chain,
    };
    let result = enumerate_min(&chain)?;
    emit(&mut manifest, args.out.as_deref(), &to_json(&result))?;
    manifest
        .finish(args.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(0)
}

fn run_discretize(args: InputArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("discretize", &args.input, threads);
    let (model, spec) = load_diffusion_only(&args.input, "discretize")?;
    let p = build_chain(&model, &spec)?;
    eprintln!(
        "grid {:?} ({} states, {} actions), dt = {}, origin node {}",
        p.grid.n,
        p.n_states(),
        p.chain.n_actions(),
        p.dt,
        p.origin
    );
    emit(
        &mut manifest,
        args.out.as_deref(),
        &(p.chain.to_json_pretty() + "\n"),
    )?;
    manifest
        .finish(args.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(0)
}

#[derive(Serialize)]
struct PdeOutput {
    mode: &'static str,
    lambda_est: Option<f64>,
    lambda_ref: Option<f64>,
    t_end: f64,
    steps: usize,
    dt: f64,
    n_states: usize,
    origin: usize,
    phi_x0: f64,
}

/// Ground state on the grid, scaled to 1 at the origin node.
fn ground_state_csv(p: &DiscretizedProblem, phi: &ValueFunction) -> String {
    let header = if p.grid.dim == 1 {
        "x,psi\n"
    } else {
        "x1,x2,psi\n"
    };
    let mut out = String::from(header);
    let scale = phi[p.origin];
    for (x, v) in p.coords.iter().zip(phi.values()) {
        for c in x {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(out, "{}", v / scale);
    }
    out
}

fn run_pde(args: PdeArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("pde", &args.io.input, threads);
    let mode: RviMode = args.mode.into();
    manifest.set(
        "mode",
        Some(match mode {
            RviMode::Normalized => "normalized",
            RviMode::EulerOde => "euler-ode",
        }),
    );
    manifest.set("lambda", args.lambda);
    manifest.set("t_end", Some(args.t_end));
    let (model, spec) = load_diffusion_only(&args.io.input, "pde")?;
    let p = build_chain(&model, &spec)?;
    let ones = ValueFunction::constant(p.n_states(), 1.0)?;
    let (run, mode_name) = match args.lambda {
        Some(l) => (
            run_parabolic_vi(&p, l, &ones, args.t_end)?,
            "value-iteration",
        ),
        None => (
            run_parabolic_rvi(&p, &ones, args.t_end, mode)?,
            match mode {
                RviMode::Normalized => "normalized",
                RviMode::EulerOde => "euler-ode",
            },
        ),
    };
    let result = PdeOutput {
        mode: mode_name,
        lambda_est: run.lambda_est,
        lambda_ref: args.lambda,
        t_end: run.t_end,
        steps: run.steps,
        dt: p.dt,
        n_states: p.n_states(),
        origin: p.origin,
        phi_x0: run.phi[p.origin],
    };
    emit(&mut manifest, args.io.out.as_deref(), &to_json(&result))?;
    let csv_path: Option<PathBuf> = args
        .csv
        .clone()
        .or_else(|| args.io.out.as_ref().map(|o| o.with_extension("csv")));
    if let Some(c) = &csv_path {
        write_file(c, &ground_state_csv(&p, &run.phi))?;
        manifest.output(c);
    }
    if let Some(t) = &args.trace {
        let mut csv = String::from("t,phi_x0\n");
        for r in &run.trace {
            let _ = writeln!(csv, "{},{}", r.t, r.phi_x0);
        }
        write_file(t, &csv)?;
        manifest.output(t);
    }
    manifest
        .finish(args.io.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(0)
}

fn converged(report: SolveReport) -> CliResult<SolveReport> {
    if report.converged {
        Ok(report)
    } else {
        Err(CliError::NotConverged(format!(
            "solver did not converge after {} iterations",
            report.iterations
        )))
    }
}

fn parse_point(s: &str, dim: usize) -> CliResult<Vec<f64>> {
    let pt: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("bad --start {s:?}: {e}")))?;
    if pt.len() != dim {
        return Err(CliError::Invalid(format!(
            "--start needs {dim} coordinates, got {}",
            pt.len()
        )));
    }
    Ok(pt)
}

fn run_mc(args: McArgs, threads: usize) -> CliResult<u8> {
    let mut manifest = RunManifest::start("mc", &args.io.input, threads);
    let solver_cfg = solver_config(&args.solver, &mut manifest);
    manifest.seed = Some(args.seed);
    manifest.set("paths", Some(args.paths));
    manifest.set("horizon", Some(args.horizon));
    manifest.set("dt_sim", Some(args.dt_sim));
    manifest.set("start", args.start.clone());
    let mc_cfg = McConfig::new(args.seed, args.paths, args.horizon)
        .with_dt_sim(args.dt_sim)
        .with_triple_tol(solver_cfg.tol);
    let problem = load_problem(&args.io.input)?;

    let text = match (args.check, problem) {
        (CheckArg::ChainIdentity, problem) => {
            let (chain, x0) = match problem {
                Problem::Chain(m) => {
                    let x0 = solver_cfg.x0;
                    (m, x0)
                }
                Problem::Diffusion(m, g) => {
                    let p = discretize(&m, &g, &args.solver)?;
                    (p.chain, p.origin)
                }
            };
            let report = converged(solve_rvi(&chain, &solver_cfg.clone().with_x0(x0))?)?;
            let start = match &args.start {
                Some(s) => s
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| CliError::Invalid(format!("bad --start {s:?}: {e}")))?,
                None => x0,
            };
            let mc = chain_identity_check(
                &chain,
                &report.policy,
                &report.value,
                report.lambda_est,
                start,
                &mc_cfg,
            )?;
            to_json(&mc)
        }
        (_, Problem::Chain(_)) => {
            return Err(CliError::Invalid(
                "SDE checks need a diffusion problem".into(),
            ));
        }
        (check, Problem::Diffusion(model, spec)) => {
            let p = discretize(&model, &spec, &args.solver)?;
            let start = match &args.start {
                Some(s) => parse_point(s, model.dim)?,
                None => vec![0.0; model.dim],
            };
            let sol = solve_discretized(&p, &solver_cfg)?;
            let policy = GridPolicy::new(&p, &sol.report.policy)?;
            match check {
                CheckArg::SdeGrowth => {
                    to_json(&sde_growth_estimate(&model, &policy, &start, &mc_cfg)?)
                }
                _ => to_json(&sde_martingale_check(
                    &model,
                    &policy,
                    &sol.report.value,
                    sol.lambda,
                    &start,
                    &mc_cfg,
                )?),
            }
        }
    };
    emit(&mut manifest, args.io.out.as_deref(), &text)?;
    manifest
        .finish(args.io.out.as_deref())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(0)
}
