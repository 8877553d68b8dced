//! Monte Carlo cross-checks of solver output.
//!
//! Every path draws from its own ChaCha stream keyed by `(seed, path index)`,
//! so estimates do not depend on how paths are scheduled across threads.
//! Sums are reduced pairwise in path order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{DiffusionModel, DiscretizedProblem, Grid};
use crate::error::{Error, Result};
use crate::model::{ChainModel, Policy, ValueFunction};
use crate::operator::{dp_residual, policy_residual};

pub const MIN_PATHS: usize = 100;

/// Paths leaving this multiple of the box radius are aborted.
pub const EXPLOSION_FACTOR: f64 = 10.0;

pub const GROWTH_BIAS_NOTE: &str = "finite-horizon estimate of a limsup; Jensen and upper-tail \
dominance bias it at finite T, so use it as a sanity bound rather than an equality";

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub seed: u64,
    pub n_paths: usize,
    /// Number of steps for chains, time for diffusions.
    pub horizon: f64,
    /// Euler–Maruyama step.
    pub dt_sim: f64,
    /// Eigen-triples whose residual exceeds `100 * triple_tol` are rejected.
    pub triple_tol: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_paths: 100_000,
            horizon: 5.0,
            dt_sim: 0.01,
            triple_tol: 1e-10,
        }
    }
}

impl McConfig {
    pub fn new(seed: u64, n_paths: usize, horizon: f64) -> Self {
        Self {
            seed,
            n_paths,
            horizon,
            ..Self::default()
        }
    }

    pub fn with_dt_sim(mut self, dt_sim: f64) -> Self {
        self.dt_sim = dt_sim;
        self
    }

    pub fn with_triple_tol(mut self, tol: f64) -> Self {
        self.triple_tol = tol;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.n_paths < MIN_PATHS {
            return Err(Error::Config(format!(
                "n_paths must be at least {MIN_PATHS}, got {}",
                self.n_paths
            )));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon must be nonnegative, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    fn chain_steps(&self) -> Result<usize> {
        self.check()?;
        if self.horizon.fract() != 0.0 {
            return Err(Error::Config(format!(
                "chain horizon counts steps and must be an integer, got {}",
                self.horizon
            )));
        }
        Ok(self.horizon as usize)
    }

    fn sde_steps(&self) -> Result<usize> {
        self.check()?;
        if !(self.dt_sim > 0.0 && self.dt_sim.is_finite()) {
            return Err(Error::Config(format!(
                "dt_sim must be positive, got {}",
                self.dt_sim
            )));
        }
        if self.horizon <= 0.0 {
            return Err(Error::Config("diffusion horizon must be positive".into()));
        }
        Ok(((self.horizon / self.dt_sim).round() as usize).max(1))
    }

    fn path_rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        rng
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub ratio_mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
    pub aborted_paths: usize,
    pub seed: u64,
}

impl McReport {
    /// `|ratio_mean - 1|` in units of the standard error.
    pub fn z_score(&self) -> f64 {
        let d = (self.ratio_mean - 1.0).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_err
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub lambda_hat: f64,
    /// Half-width of an approximate 95% interval (delta method).
    pub ci_half_width: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub aborted_paths: usize,
    pub seed: u64,
    pub bias_note: &'static str,
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean.
fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = if xs.len() > 1 {
        pairwise_sum(&dev) / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

fn summarize(samples: Vec<Option<f64>>, cfg: &McConfig) -> Result<McReport> {
    let kept: Vec<f64> = samples.iter().flatten().copied().collect();
    let aborted = samples.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Config(format!("all {aborted} paths exploded")));
    }
    let (ratio_mean, std_err) = mean_and_se(&kept);
    Ok(McReport {
        ratio_mean,
        std_err,
        n_paths: cfg.n_paths,
        aborted_paths: aborted,
        seed: cfg.seed,
    })
}

fn sample_next(cols: &[usize], probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (&y, &p) in cols.iter().zip(probs) {
        acc += p;
        if u < acc {
            return y;
        }
    }
    // rounding left a sliver above the last cumulative sum
    cols[probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(cols.len() - 1)]
}

/// Simulates `N`-step paths of the chain under `policy` and averages
/// `e^{sum k} V(X_N) / (lambda^N V(x_start))`, which has mean exactly 1 for an
/// eigen-triple.
pub fn chain_identity_check(
    model: &ChainModel,
    policy: &Policy,
    v: &ValueFunction,
    lambda: f64,
    x_start: usize,
    cfg: &McConfig,
) -> Result<McReport> {
    let steps = cfg.chain_steps()?;
    if x_start >= model.n_states() {
        return Err(Error::Config(format!(
            "start state {x_start} out of range for {} states",
            model.n_states()
        )));
    }
    let residual = dp_residual(model, v, lambda)?.max(policy_residual(model, policy, v, lambda)?);
    let limit = 100.0 * cfg.triple_tol;
    if !(residual <= limit) {
        return Err(Error::InvalidTriple { residual, limit });
    }
    let log_v: Vec<f64> = v.values().iter().map(|x| x.ln()).collect();
    let log_lambda = lambda.ln();
    let actions = policy.actions();
    let samples: Vec<Option<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = cfg.path_rng(path);
            let mut x = x_start;
            let mut log_w = 0.0;
            for _ in 0..steps {
                let u = actions[x];
                log_w += model.cost(x, u);
                let (cols, probs) = model.row(x, u);
                x = sample_next(cols, probs, rng.random::<f64>());
            }
            let exponent = log_w - steps as f64 * log_lambda + log_v[x] - log_v[x_start];
            Some(exponent.exp())
        })
        .collect();
    summarize(samples, cfg)
}

/// Piecewise-constant feedback on a grid: each point uses the action chosen
/// at its nearest node.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    pub grid: Grid,
    pub actions: Vec<f64>,
    pub choice: Vec<usize>,
}

impl GridPolicy {
    pub fn new(problem: &DiscretizedProblem, policy: &Policy) -> Result<Self> {
        policy.check_for(&problem.chain)?;
        Ok(Self {
            grid: problem.grid.clone(),
            actions: problem.actions.clone(),
            choice: policy.actions().to_vec(),
        })
    }

    /// The first action everywhere.
    pub fn constant(problem: &DiscretizedProblem) -> Self {
        Self {
            grid: problem.grid.clone(),
            actions: problem.actions.clone(),
            choice: vec![0; problem.n_states()],
        }
    }

    #[inline]
    pub fn action_at(&self, x: &[f64]) -> f64 {
        self.actions[self.choice[self.grid.nearest(x)]]
    }
}

struct SdePath {
    /// `sum_m c(X_m, U_m)` over the Euler steps.
    cost_sum: f64,
    end: Vec<f64>,
}

fn simulate(
    model: &DiffusionModel,
    policy: &GridPolicy,
    x_start: &[f64],
    steps: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Option<SdePath> {
    let dim = model.dim;
    let limit = EXPLOSION_FACTOR * model.radius;
    let sqrt_dt = dt.sqrt();
    let mut x = x_start.to_vec();
    let mut next = vec![0.0; dim];
    let mut cost_sum = 0.0;
    for _ in 0..steps {
        let u = policy.action_at(&x);
        cost_sum += model.cost_at(&x, u);
        for (axis, nx) in next.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *nx =
                x[axis] + model.drift_at(&x, u, axis) * dt + model.sigma_at(&x, axis) * sqrt_dt * z;
        }
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !(v.abs() <= limit)) {
            return None;
        }
    }
    Some(SdePath { cost_sum, end: x })
}

fn check_start(model: &DiffusionModel, x_start: &[f64]) -> Result<()> {
    model.check()?;
    if x_start.len() != model.dim {
        return Err(Error::Dimension(format!(
            "start point has {} coordinates, model has {}",
            x_start.len(),
            model.dim
        )));
    }
    Ok(())
}

/// Estimates the growth rate `(1/T) log E[e^{int_0^T c dt}]` by Euler–Maruyama.
pub fn sde_growth_estimate(
    model: &DiffusionModel,
    policy: &GridPolicy,
    x_start: &[f64],
    cfg: &McConfig,
) -> Result<GrowthReport> {
    check_start(model, x_start)?;
    let steps = cfg.sde_steps()?;
    let dt = cfg.dt_sim;
    let integrals: Vec<Option<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = cfg.path_rng(path);
            simulate(model, policy, x_start, steps, dt, &mut rng).map(|p| dt * p.cost_sum)
        })
        .collect();
    let kept: Vec<f64> = integrals.iter().flatten().copied().collect();
    let aborted = integrals.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Config(format!("all {aborted} paths exploded")));
    }
    let t_eff = steps as f64 * dt;
    let top = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = kept.iter().map(|i| (i - top).exp()).collect();
    let (mean, se) = mean_and_se(&scaled);
    Ok(GrowthReport {
        lambda_hat: (top + mean.ln()) / t_eff,
        ci_half_width: 1.96 * se / mean / t_eff,
        horizon: t_eff,
        n_paths: cfg.n_paths,
        aborted_paths: aborted,
        seed: cfg.seed,
        bias_note: GROWTH_BIAS_NOTE,
    })
}

/// Averages `e^{int_0^T (c - lambda) dt} Psi_h(X_T) / Psi_h(x)`, with `Psi_h`
/// interpolated from the grid nodes of `policy.grid`.
pub fn sde_martingale_check(
    model: &DiffusionModel,
    policy: &GridPolicy,
    psi: &ValueFunction,
    lambda: f64,
    x_start: &[f64],
    cfg: &McConfig,
) -> Result<McReport> {
    check_start(model, x_start)?;
    if psi.len() != policy.grid.len() {
        return Err(Error::Dimension(format!(
            "ground state has {} entries, grid has {} nodes",
            psi.len(),
            policy.grid.len()
        )));
    }
    let steps = cfg.sde_steps()?;
    let dt = cfg.dt_sim;
    let psi = psi.values();
    let psi_start = policy.grid.interpolate(psi, x_start);
    let samples: Vec<Option<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = cfg.path_rng(path);
            simulate(model, policy, x_start, steps, dt, &mut rng).map(|p| {
                let exponent = dt * (p.cost_sum - steps as f64 * lambda);
                exponent.exp() * policy.grid.interpolate(psi, &p.end) / psi_start
            })
        })
        .collect();
    summarize(samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_chain, ou_model, GridSpec};
    use crate::expr::Expr;

    fn rank_one() -> ChainModel {
        ChainModel::new(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![2f64.ln()], vec![4f64.ln()]],
        )
        .unwrap()
    }

    #[test]
    fn zero_cost_identity_is_exact_on_every_path() {
        let m = ChainModel::new(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.2, 0.8]]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let v = ValueFunction::constant(2, 1.0).unwrap();
        let cfg = McConfig::new(3, 500, 7.0);
        let r = chain_identity_check(&m, &Policy::constant(2, 0), &v, 1.0, 0, &cfg).unwrap();
        assert_eq!(r.ratio_mean, 1.0);
        assert_eq!(r.std_err, 0.0);
        assert_eq!(r.z_score(), 0.0);
    }

    #[test]
    fn zero_horizon_is_an_empty_product() {
        let m = rank_one();
        let v = ValueFunction::new(vec![1.0, 2.0]).unwrap();
        let cfg = McConfig::new(1, 100, 0.0);
        let r = chain_identity_check(&m, &Policy::constant(2, 0), &v, 3.0, 1, &cfg).unwrap();
        assert_eq!(r.ratio_mean, 1.0);
        assert_eq!(r.std_err, 0.0);
    }

    #[test]
    fn rejects_a_wrong_eigenvalue() {
        let v = ValueFunction::new(vec![1.0, 2.0]).unwrap();
        let cfg = McConfig::new(1, 100, 3.0);
        let err = chain_identity_check(&rank_one(), &Policy::constant(2, 0), &v, 3.1, 0, &cfg);
        assert!(matches!(err, Err(Error::InvalidTriple { .. })));
    }

    #[test]
    fn rejects_too_few_paths_and_fractional_steps() {
        let v = ValueFunction::new(vec![1.0, 2.0]).unwrap();
        let p = Policy::constant(2, 0);
        assert!(
            chain_identity_check(&rank_one(), &p, &v, 3.0, 0, &McConfig::new(1, 99, 3.0)).is_err()
        );
        assert!(
            chain_identity_check(&rank_one(), &p, &v, 3.0, 0, &McConfig::new(1, 100, 2.5)).is_err()
        );
    }

    #[test]
    fn same_seed_same_bits() {
        let v = ValueFunction::new(vec![1.0, 2.0]).unwrap();
        let p = Policy::constant(2, 0);
        let cfg = McConfig::new(9, 2000, 4.0);
        let a = chain_identity_check(&rank_one(), &p, &v, 3.0, 0, &cfg).unwrap();
        let b = chain_identity_check(&rank_one(), &p, &v, 3.0, 0, &cfg).unwrap();
        assert_eq!(a.ratio_mean.to_bits(), b.ratio_mean.to_bits());
        assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
        let c = chain_identity_check(&rank_one(), &p, &v, 3.0, 0, &McConfig::new(10, 2000, 4.0))
            .unwrap();
        assert_ne!(a.ratio_mean.to_bits(), c.ratio_mean.to_bits());
    }

    #[test]
    fn sampling_follows_cumulative_probabilities() {
        assert_eq!(sample_next(&[2, 5], &[0.25, 0.75], 0.0), 2);
        assert_eq!(sample_next(&[2, 5], &[0.25, 0.75], 0.25), 5);
        assert_eq!(
            sample_next(&[2, 5, 7], &[0.5, 0.5 - 1e-17, 0.0], 1.0 - 1e-18),
            5
        );
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    fn flat(cost: f64) -> (DiffusionModel, GridPolicy) {
        let mut m = ou_model(0.1, 2.0);
        m.cost = Expr::Num(cost);
        let p = build_chain(&m, &GridSpec::uniform(0.25)).unwrap();
        let pol = GridPolicy::constant(&p);
        (m, pol)
    }

    #[test]
    fn deterministic_integrands_give_exact_rates() {
        let cfg = McConfig::new(2, 200, 3.0).with_dt_sim(0.01);
        let (m0, p0) = flat(0.0);
        let r0 = sde_growth_estimate(&m0, &p0, &[0.0], &cfg).unwrap();
        assert_eq!(r0.lambda_hat, 0.0);
        assert_eq!(r0.ci_half_width, 0.0);
        let (m1, p1) = flat(1.0);
        let r1 = sde_growth_estimate(&m1, &p1, &[0.0], &cfg).unwrap();
        assert_eq!(r1.lambda_hat, 1.0);
        assert!(r1.bias_note.contains("finite"));
    }

    #[test]
    fn flat_martingale_is_exact() {
        let (m, pol) = flat(0.0);
        let psi = ValueFunction::constant(pol.grid.len(), 1.0).unwrap();
        let r =
            sde_martingale_check(&m, &pol, &psi, 0.0, &[0.3], &McConfig::new(4, 300, 1.0)).unwrap();
        assert_eq!(r.ratio_mean, 1.0);
        assert_eq!(r.aborted_paths, 0);
    }

    #[test]
    fn explosive_paths_are_counted() {
        let mut m = ou_model(0.1, 0.5);
        m.drift = vec!["x1^3".parse().unwrap()];
        let p = build_chain(&m, &GridSpec::uniform(0.25)).unwrap();
        let pol = GridPolicy::constant(&p);
        let r = sde_growth_estimate(&m, &pol, &[3.0], &McConfig::new(1, 100, 5.0)).unwrap_err();
        assert!(r.to_string().contains("exploded"));
        let cfg = McConfig::new(1, 400, 1.0);
        let partial = sde_growth_estimate(&m, &pol, &[0.0], &cfg).unwrap();
        assert!(partial.aborted_paths > 0 && partial.aborted_paths < 400);
    }
}
