//! Markov-chain approximation of a controlled diffusion
//!
//! `dX = b(X, U) dt + sigma(X) dW` on the box `[-R, R]^dim`
//!
//! together with explicit time stepping of the parabolic value iteration and
//! relative value iteration on the resulting grid chain.
//!
//! Each axis contributes nearest-neighbour transitions. With the default
//! [`Stencil::Central`] the drift is differenced centrally wherever that keeps
//! both neighbour probabilities nonnegative (`|b| <= a / h`) and upwind
//! elsewhere; [`Stencil::Upwind`] always differences one-sidedly. Mass that
//! would leave the box is folded back onto the boundary node.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::model::{ChainModel, StateLabel, ValueFunction};
use crate::operator::{apply_linear, check_positive};
use crate::rvi::{solve_rvi, SolveReport, SolverConfig};

/// Automatic time steps use this fraction of the CFL bound.
pub const AUTO_DT_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub dim: usize,
    /// One drift expression per axis, in `x1`, `x2`, `u`.
    pub drift: Vec<Expr>,
    /// Diagonal diffusion coefficients, one per axis.
    pub sigma: Vec<Expr>,
    /// Running cost `c(x, u)`.
    pub cost: Expr,
    /// Finite action set; continuous action spaces must be sampled beforehand.
    pub actions: Vec<f64>,
    /// Half-width of the truncation box.
    pub radius: f64,
}

impl DiffusionModel {
    pub fn check(&self) -> Result<()> {
        if !(self.dim == 1 || self.dim == 2) {
            return Err(Error::Config(format!(
                "dim must be 1 or 2, got {}",
                self.dim
            )));
        }
        if self.drift.len() != self.dim || self.sigma.len() != self.dim {
            return Err(Error::Dimension(format!(
                "dim = {} needs {0} drift and sigma expressions, got {} and {}",
                self.dim,
                self.drift.len(),
                self.sigma.len()
            )));
        }
        let reads = self
            .drift
            .iter()
            .chain(&self.sigma)
            .chain(std::iter::once(&self.cost))
            .map(Expr::spatial_dim)
            .max()
            .unwrap_or(0);
        if reads > self.dim {
            return Err(Error::Config(format!(
                "coefficients reference x{reads} in a {}-dimensional model",
                self.dim
            )));
        }
        if self.actions.is_empty() || self.actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config(
                "actions must be a non-empty list of finite numbers".into(),
            ));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn drift_at(&self, x: &[f64], u: f64, axis: usize) -> f64 {
        self.drift[axis].eval(x, u)
    }

    #[inline]
    pub fn sigma_at(&self, x: &[f64], axis: usize) -> f64 {
        self.sigma[axis].eval(x, 0.0)
    }

    #[inline]
    pub fn cost_at(&self, x: &[f64], u: f64) -> f64 {
        self.cost.eval(x, u)
    }

    /// The same model with `shift` added to the running cost.
    pub fn shift_cost(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.cost = Expr::Bin(
            crate::expr::BinOp::Add,
            Box::new(self.cost.clone()),
            Box::new(Expr::Num(shift)),
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// Central drift differences where monotone, upwind otherwise.
    #[default]
    Central,
    /// One-sided drift differences everywhere.
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    /// [`AUTO_DT_FRACTION`] times the CFL bound.
    Auto,
    Fixed(f64),
}

/// Mesh and time step. The boundary is always reflecting.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Mesh width per axis; a single entry is reused for every axis.
    pub h: Vec<f64>,
    pub dt: TimeStep,
    pub stencil: Stencil,
}

impl GridSpec {
    pub fn uniform(h: f64) -> Self {
        Self {
            h: vec![h],
            dt: TimeStep::Auto,
            stencil: Stencil::Central,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = TimeStep::Fixed(dt);
        self
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }
}

/// Tensor grid on `[-R, R]^dim`; state index runs fastest along `x1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub dim: usize,
    pub n: Vec<usize>,
    pub h: Vec<f64>,
    pub radius: f64,
}

impl Grid {
    fn new(dim: usize, radius: f64, spec_h: &[f64]) -> Result<Self> {
        let hs: Vec<f64> = match spec_h.len() {
            1 => vec![spec_h[0]; dim],
            l if l == dim => spec_h.to_vec(),
            l => {
                return Err(Error::Dimension(format!(
                    "{l} mesh widths for a {dim}-dimensional grid"
                )))
            }
        };
        let mut n = Vec::with_capacity(dim);
        let mut h = Vec::with_capacity(dim);
        for &hi in &hs {
            if !(hi > 0.0 && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "mesh width must be positive, got {hi}"
                )));
            }
            let cells = (2.0 * radius / hi).round();
            if cells < 2.0 || ((cells * hi) - 2.0 * radius).abs() > 1e-9 * radius {
                return Err(Error::Config(format!(
                    "box width {} is not a multiple (>= 2) of h = {hi}",
                    2.0 * radius
                )));
            }
            n.push(cells as usize + 1);
            h.push(2.0 * radius / cells);
        }
        Ok(Self { dim, n, h, radius })
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate of node `i` on `axis`; symmetric about zero by construction.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let cells = (self.n[axis] - 1) as f64;
        self.radius * (2.0 * i as f64 - cells) / cells
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim);
        for &ni in &self.n {
            out.push(idx % ni);
            idx /= ni;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (&i, &ni) in multi.iter().zip(&self.n) {
            idx += i * stride;
            stride *= ni;
        }
        idx
    }

    fn stride(&self, axis: usize) -> usize {
        self.n[..axis].iter().product()
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.coord(axis, i))
            .collect()
    }

    /// Node closest to `x` (coordinates clamped to the box).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let multi: Vec<usize> = (0..self.dim)
            .map(|axis| {
                let t = ((x[axis] + self.radius) / self.h[axis]).round();
                t.clamp(0.0, (self.n[axis] - 1) as f64) as usize
            })
            .collect();
        self.flat_index(&multi)
    }

    /// Multilinear interpolation of nodal `values` at `x`, clamped to the box.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for axis in 0..self.dim {
            let cells = self.n[axis] - 1;
            let t = ((x[axis] + self.radius) / self.h[axis]).clamp(0.0, cells as f64);
            let i = (t.floor() as usize).min(cells - 1);
            base[axis] = i;
            frac[axis] = t - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut multi = [0usize; 2];
            for (axis, m) in multi.iter_mut().enumerate().take(self.dim) {
                let bit = (corner >> axis) & 1;
                *m = base[axis] + bit;
                w *= if bit == 1 {
                    frac[axis]
                } else {
                    1.0 - frac[axis]
                };
            }
            if w != 0.0 {
                acc += w * values[self.flat_index(&multi[..self.dim])];
            }
        }
        acc
    }
}

/// Grid chain together with the data needed to map back to the diffusion.
#[derive(Debug, Clone)]
pub struct DiscretizedProblem {
    pub chain: ChainModel,
    pub grid: Grid,
    /// Coordinates of every state.
    pub coords: Vec<Vec<f64>>,
    pub dt: f64,
    /// Grid node nearest the origin; the RVI reference state.
    pub origin: usize,
    pub actions: Vec<f64>,
    pub lambda_ref: Option<f64>,
}

impl DiscretizedProblem {
    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    /// Continuous-time rate from a chain eigenvalue: `log(Lambda_h) / dt`.
    pub fn rate_from_eigenvalue(&self, lambda_h: f64) -> f64 {
        lambda_h.ln() / self.dt
    }

    /// Solver configuration with the reference state set to the origin node.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig::default().with_x0(self.origin)
    }
}

/// Largest stable time step: `1 / sum_i (max a_ii / h_i^2 + max |b_i| / h_i)`,
/// maxima taken over grid nodes and actions.
pub fn cfl_bound(model: &DiffusionModel, spec: &GridSpec) -> Result<f64> {
    model.check()?;
    let grid = Grid::new(model.dim, model.radius, &spec.h)?;
    let coeffs = Coefficients::evaluate(model, &grid)?;
    Ok(coeffs.cfl(&grid))
}

struct Coefficients {
    /// `a_ii` per node and axis: `[node * dim + axis]`.
    a: Vec<f64>,
    /// Drift per node, action and axis: `[(node * m + u) * dim + axis]`.
    b: Vec<f64>,
    /// Cost per node and action.
    c: Vec<f64>,
}

impl Coefficients {
    fn evaluate(model: &DiffusionModel, grid: &Grid) -> Result<Self> {
        let (dim, m) = (model.dim, model.actions.len());
        let n = grid.len();
        let mut a = Vec::with_capacity(n * dim);
        let mut b = Vec::with_capacity(n * m * dim);
        let mut c = Vec::with_capacity(n * m);
        for state in 0..n {
            let x = grid.node(state);
            for axis in 0..dim {
                let s = model.sigma_at(&x, axis);
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::NotElliptic {
                        state,
                        axis: axis + 1,
                        value: s,
                    });
                }
                a.push(s * s);
            }
            for (action, &u) in model.actions.iter().enumerate() {
                for axis in 0..dim {
                    let v = model.drift_at(&x, u, axis);
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: "drift",
                            state,
                            action,
                        });
                    }
                    b.push(v);
                }
                let cost = model.cost_at(&x, u);
                if !cost.is_finite() {
                    return Err(Error::NonFinite {
                        what: "cost",
                        state,
                        action,
                    });
                }
                c.push(cost);
            }
        }
        Ok(Self { a, b, c })
    }

    fn cfl(&self, grid: &Grid) -> f64 {
        let dim = grid.dim;
        let mut rate = 0.0;
        for axis in 0..dim {
            let a_max = self
                .a
                .iter()
                .skip(axis)
                .step_by(dim)
                .fold(0.0f64, |m, v| m.max(*v));
            let b_max = self
                .b
                .iter()
                .skip(axis)
                .step_by(dim)
                .fold(0.0f64, |m, v| m.max(v.abs()));
            rate += a_max / (grid.h[axis] * grid.h[axis]) + b_max / grid.h[axis];
        }
        1.0 / rate
    }
}

/// Neighbour probabilities `(toward -, toward +)` along one axis.
fn neighbour_probs(stencil: Stencil, a: f64, b: f64, h: f64, dt: f64) -> (f64, f64) {
    let diff = a / (2.0 * h * h);
    let central = stencil == Stencil::Central && b.abs() * h <= a;
    if central {
        (dt * (diff - b / (2.0 * h)), dt * (diff + b / (2.0 * h)))
    } else {
        (
            dt * (diff + (-b).max(0.0) / h),
            dt * (diff + b.max(0.0) / h),
        )
    }
}

/// Assembles the grid chain: neighbour moves from the discretized generator,
/// self-loop as the complement, reflected mass folded onto boundary nodes and
/// stage cost `dt * c(x, u)`.
pub fn build_chain(model: &DiffusionModel, spec: &GridSpec) -> Result<DiscretizedProblem> {
    model.check()?;
    let grid = Grid::new(model.dim, model.radius, &spec.h)?;
    let coeffs = Coefficients::evaluate(model, &grid)?;
    let dt = match spec.dt {
        TimeStep::Auto => AUTO_DT_FRACTION * coeffs.cfl(&grid),
        TimeStep::Fixed(dt) if dt > 0.0 && dt.is_finite() => dt,
        TimeStep::Fixed(dt) => return Err(Error::Config(format!("dt must be positive, got {dt}"))),
    };

    let (dim, m) = (model.dim, model.actions.len());
    let n = grid.len();
    let mut rows = Vec::with_capacity(n * m);
    let mut costs = Vec::with_capacity(n * m);
    for state in 0..n {
        let multi = grid.multi_index(state);
        for action in 0..m {
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * dim + 1);
            let mut moved = 0.0;
            let mut folded = 0.0;
            for (axis, &i) in multi.iter().enumerate() {
                let a = coeffs.a[state * dim + axis];
                let b = coeffs.b[(state * m + action) * dim + axis];
                let (down, up) = neighbour_probs(spec.stencil, a, b, grid.h[axis], dt);
                moved += down + up;
                let stride = grid.stride(axis);
                if i == 0 {
                    folded += down;
                } else {
                    entries.push((state - stride, down));
                }
                if i + 1 == grid.n[axis] {
                    folded += up;
                } else {
                    entries.push((state + stride, up));
                }
            }
            let self_loop = 1.0 - moved;
            if self_loop < 0.0 {
                return Err(Error::Cfl {
                    state,
                    action,
                    self_loop,
                });
            }
            entries.push((state, self_loop + folded));
            entries.retain(|(_, p)| p.to_bits() != 0);
            entries.sort_by_key(|(y, _)| *y);
            rows.push(entries);
            costs.push(dt * coeffs.c[state * m + action]);
        }
    }

    let coords: Vec<Vec<f64>> = (0..n).map(|s| grid.node(s)).collect();
    let labels = coords
        .iter()
        .map(|x| {
            if dim == 1 {
                StateLabel::Scalar(x[0])
            } else {
                StateLabel::Coords(x.clone())
            }
        })
        .collect();
    let chain = ChainModel::from_sparse_rows(n, m, rows, costs)?.with_labels(labels)?;
    chain.check()?;
    let origin = grid.nearest(&vec![0.0; dim]);
    Ok(DiscretizedProblem {
        chain,
        grid,
        coords,
        dt,
        origin,
        actions: model.actions.clone(),
        lambda_ref: None,
    })
}

/// Time step scheme for the parabolic relative value iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RviMode {
    /// Discrete-time RVI on the grid chain: `V <- T V / V(x0)`.
    Normalized,
    /// Explicit Euler step of `d/dt Phi = min_u (L_u Phi + c Phi) - Phi(x0) Phi`.
    EulerOde,
}

impl std::str::FromStr for RviMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(RviMode::Normalized),
            "euler-ode" => Ok(RviMode::EulerOde),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected normalized or euler-ode)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub phi_x0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicRun {
    pub phi: ValueFunction,
    pub steps: usize,
    /// Horizon actually integrated, `steps * dt`.
    pub t_end: f64,
    /// Growth-rate estimate; `None` for value iteration.
    pub lambda_est: Option<f64>,
    pub trace: Vec<TracePoint>,
}

fn step_count(problem: &DiscretizedProblem, t_end: f64) -> Result<usize> {
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Config(format!(
            "t_end must be nonnegative, got {t_end}"
        )));
    }
    Ok((t_end / problem.dt).round() as usize)
}

fn check_start(problem: &DiscretizedProblem, phi0: &ValueFunction) -> Result<()> {
    if phi0.len() != problem.n_states() {
        return Err(Error::Dimension(format!(
            "initial value has {} entries, grid has {} nodes",
            phi0.len(),
            problem.n_states()
        )));
    }
    Ok(())
}

/// Explicit Euler update `Phi + dt [min_u (L_u Phi + c Phi) - rate Phi]`,
/// written through the chain as `min_u (P_u Phi + k_u Phi) - dt rate Phi`.
fn euler_sweep(
    chain: &ChainModel,
    phi: &[f64],
    rate: f64,
    dt: f64,
    out: &mut [f64],
    step: usize,
) -> Result<()> {
    for (x, o) in out.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        for u in 0..chain.n_actions() {
            let (cols, probs) = chain.row(x, u);
            let mut s = 0.0;
            for (&y, &p) in cols.iter().zip(probs) {
                s += p * phi[y];
            }
            let val = s + chain.cost(x, u) * phi[x];
            if val < best || u == 0 {
                best = val;
            }
        }
        *o = best - dt * rate * phi[x];
    }
    if let Some(state) = out.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NegativeIterate { state, step });
    }
    check_positive(out)
}

/// Parabolic value iteration with a known rate: each step multiplies by
/// `e^{-lambda_ref dt}` after one application of the grid Bellman operator.
pub fn run_parabolic_vi(
    problem: &DiscretizedProblem,
    lambda_ref: f64,
    phi0: &ValueFunction,
    t_end: f64,
) -> Result<ParabolicRun> {
    check_start(problem, phi0)?;
    let steps = step_count(problem, t_end)?;
    let damp = (-lambda_ref * problem.dt).exp();
    let n = problem.n_states();
    let x0 = problem.origin;
    let mut phi = phi0.values().to_vec();
    let mut image = vec![0.0; n];
    let mut greedy = vec![0; n];
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        apply_linear(&problem.chain, &phi, &mut image, &mut greedy)?;
        for (p, t) in phi.iter_mut().zip(&image) {
            *p = t * damp;
        }
        check_positive(&phi)?;
        trace.push(TracePoint {
            t: step as f64 * problem.dt,
            phi_x0: phi[x0],
        });
    }
    Ok(ParabolicRun {
        phi: ValueFunction::new(phi)?,
        steps,
        t_end: steps as f64 * problem.dt,
        lambda_est: None,
        trace,
    })
}

/// Parabolic relative value iteration. In [`RviMode::Normalized`] the rate
/// estimate is `log(Phi(x0)) / dt`; in [`RviMode::EulerOde`] it is `Phi(x0)`.
pub fn run_parabolic_rvi(
    problem: &DiscretizedProblem,
    phi0: &ValueFunction,
    t_end: f64,
    mode: RviMode,
) -> Result<ParabolicRun> {
    check_start(problem, phi0)?;
    let steps = step_count(problem, t_end)?;
    let n = problem.n_states();
    let x0 = problem.origin;
    let dt = problem.dt;
    let mut phi = phi0.values().to_vec();
    let mut next = vec![0.0; n];
    let mut greedy = vec![0; n];
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        match mode {
            RviMode::Normalized => {
                apply_linear(&problem.chain, &phi, &mut next, &mut greedy)?;
                let norm = phi[x0];
                next.iter_mut().for_each(|v| *v /= norm);
                check_positive(&next)?;
            }
            RviMode::EulerOde => euler_sweep(&problem.chain, &phi, phi[x0], dt, &mut next, step)?,
        }
        std::mem::swap(&mut phi, &mut next);
        trace.push(TracePoint {
            t: step as f64 * dt,
            phi_x0: phi[x0],
        });
    }
    let lambda_est = match mode {
        RviMode::Normalized => phi[x0].ln() / dt,
        RviMode::EulerOde => phi[x0],
    };
    Ok(ParabolicRun {
        phi: ValueFunction::new(phi)?,
        steps,
        t_end: steps as f64 * dt,
        lambda_est: Some(lambda_est),
        trace,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioStep {
    pub t: f64,
    /// Spatial coefficient of variation of `Phi_bar / Phi`.
    pub cov: f64,
    pub ratio_x0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioDiagnostic {
    pub mode: RviMode,
    pub lambda_ref: f64,
    pub steps: Vec<RatioStep>,
    pub max_cov: f64,
    /// `max_cov / dt`: the first-order constant of the Euler scheme.
    pub cov_per_dt: f64,
}

fn coefficient_of_variation(num: &[f64], den: &[f64]) -> f64 {
    let n = num.len() as f64;
    let ratios = num.iter().zip(den).map(|(a, b)| a / b);
    let mean = ratios.clone().sum::<f64>() / n;
    let var = ratios.map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Runs parabolic VI (rate `problem.lambda_ref`, or the RVI estimate when
/// unset) and RVI side by side from `phi0` and records how far `Phi_bar / Phi`
/// is from a spatial constant at every step.
pub fn ratio_diagnostic(
    problem: &DiscretizedProblem,
    phi0: &ValueFunction,
    t_end: f64,
    mode: RviMode,
) -> Result<RatioDiagnostic> {
    check_start(problem, phi0)?;
    let lambda_ref = match problem.lambda_ref {
        Some(l) => l,
        None => run_parabolic_rvi(problem, phi0, t_end, mode)?
            .lambda_est
            .expect("rvi reports a rate"),
    };
    let steps = step_count(problem, t_end)?;
    let n = problem.n_states();
    let (x0, dt) = (problem.origin, problem.dt);
    let damp = (-lambda_ref * dt).exp();
    let mut bar = phi0.values().to_vec();
    let mut phi = bar.clone();
    let mut bar_next = vec![0.0; n];
    let mut phi_next = vec![0.0; n];
    let mut greedy = vec![0; n];
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        match mode {
            RviMode::Normalized => {
                apply_linear(&problem.chain, &bar, &mut bar_next, &mut greedy)?;
                bar_next.iter_mut().for_each(|v| *v *= damp);
                check_positive(&bar_next)?;
                apply_linear(&problem.chain, &phi, &mut phi_next, &mut greedy)?;
                let norm = phi[x0];
                phi_next.iter_mut().for_each(|v| *v /= norm);
                check_positive(&phi_next)?;
            }
            RviMode::EulerOde => {
                euler_sweep(&problem.chain, &bar, lambda_ref, dt, &mut bar_next, step)?;
                euler_sweep(&problem.chain, &phi, phi[x0], dt, &mut phi_next, step)?;
            }
        }
        std::mem::swap(&mut bar, &mut bar_next);
        std::mem::swap(&mut phi, &mut phi_next);
        out.push(RatioStep {
            t: step as f64 * dt,
            cov: coefficient_of_variation(&bar, &phi),
            ratio_x0: bar[x0] / phi[x0],
        });
    }
    let max_cov = out.iter().map(|s| s.cov).fold(0.0, f64::max);
    Ok(RatioDiagnostic {
        mode,
        lambda_ref,
        steps: out,
        max_cov,
        cov_per_dt: max_cov / dt,
    })
}

/// Closed-form eigenpair of the uncontrolled Ornstein–Uhlenbeck benchmark
/// `b(x) = -x`, `sigma = sqrt(2)`, `c(x) = alpha x^2`: with
/// `beta = (1 - sqrt(1 - 4 alpha)) / 4` the ground state is `exp(beta x^2)`
/// and the eigenvalue is `2 beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuReference {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_star: f64,
}

impl OuReference {
    pub fn ground_state(&self, x: f64) -> f64 {
        (self.beta * x * x).exp()
    }
}

pub fn ou_reference(alpha: f64) -> Result<OuReference> {
    if !(alpha > 0.0 && alpha < 0.25) {
        return Err(Error::Config(format!(
            "OU cost weight must lie in (0, 1/4), got {alpha}"
        )));
    }
    let beta = (1.0 - (1.0 - 4.0 * alpha).sqrt()) / 4.0;
    Ok(OuReference {
        alpha,
        beta,
        lambda_star: 2.0 * beta,
    })
}

/// The one-dimensional OU benchmark model on `[-radius, radius]`.
pub fn ou_model(alpha: f64, radius: f64) -> DiffusionModel {
    DiffusionModel {
        dim: 1,
        drift: vec!["-x1".parse().expect("valid expression")],
        sigma: vec![Expr::Num(std::f64::consts::SQRT_2)],
        cost: Expr::Bin(
            crate::expr::BinOp::Mul,
            Box::new(Expr::Num(alpha)),
            Box::new("x1^2".parse().expect("valid expression")),
        ),
        actions: vec![0.0],
        radius,
    }
}

/// Converged grid eigenproblem.
#[derive(Debug, Clone, Serialize)]
pub struct DiffusionSolution {
    /// Continuous-time rate `log(Lambda_h) / dt`.
    pub lambda: f64,
    pub report: SolveReport,
}

/// Solves the grid chain by RVI (reference state forced to the origin node)
/// and converts the eigenvalue to a rate. Non-convergence is an error here.
pub fn solve_discretized(
    problem: &DiscretizedProblem,
    config: &SolverConfig,
) -> Result<DiffusionSolution> {
    let cfg = config.clone().with_x0(problem.origin);
    let report = solve_rvi(&problem.chain, &cfg)?;
    if !report.converged {
        return Err(Error::SolverNotConverged {
            iterations: report.iterations,
        });
    }
    Ok(DiffusionSolution {
        lambda: problem.rate_from_eigenvalue(report.lambda_est),
        report,
    })
}

/// `log(Lambda_h) / dt` for the grid chain.
pub fn lambda_from_chain(problem: &DiscretizedProblem, config: &SolverConfig) -> Result<f64> {
    Ok(solve_discretized(problem, config)?.lambda)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DtField {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DiffusionFile {
    #[serde(rename = "type")]
    kind: String,
    dim: usize,
    drift: OneOrMany<Expr>,
    sigma: OneOrMany<Expr>,
    cost: Expr,
    actions: Vec<f64>,
    radius: f64,
    h: OneOrMany<f64>,
    #[serde(default)]
    dt: Option<DtField>,
    #[serde(default)]
    stencil: Stencil,
}

impl DiffusionFile {
    pub(crate) fn into_parts(self) -> Result<(DiffusionModel, GridSpec)> {
        if self.kind != "diffusion" {
            return Err(Error::Config(format!(
                "expected \"type\": \"diffusion\", found {:?}",
                self.kind
            )));
        }
        let dt = match self.dt {
            None => TimeStep::Auto,
            Some(DtField::Value(v)) => TimeStep::Fixed(v),
            Some(DtField::Keyword(k)) if k == "auto" => TimeStep::Auto,
            Some(DtField::Keyword(k)) => {
                return Err(Error::Config(format!(
                    "dt must be a number or \"auto\", got {k:?}"
                )))
            }
        };
        let model = DiffusionModel {
            dim: self.dim,
            drift: self.drift.into_vec(),
            sigma: self.sigma.into_vec(),
            cost: self.cost,
            actions: self.actions,
            radius: self.radius,
        };
        model.check()?;
        Ok((
            model,
            GridSpec {
                h: self.h.into_vec(),
                dt,
                stencil: self.stencil,
            },
        ))
    }
}

/// Parses a diffusion problem document.
pub fn load_diffusion<R: Read>(source: R) -> Result<(DiffusionModel, GridSpec)> {
    let file: DiffusionFile = serde_json::from_reader(source)?;
    file.into_parts()
}
