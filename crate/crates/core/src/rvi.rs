//! Value iteration (known eigenvalue) and relative value iteration
//! (self-normalizing at a reference state) for the multiplicative Bellman
//! equation `lambda V = T V`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ChainModel, Policy, ValueFunction};
use crate::operator::{apply_linear, apply_log, check_positive, ratio_bounds};

/// Linear-mode value iteration gives up once an iterate leaves `[1e-150, 1e150]`.
pub const DIVERGENCE_BOUND: f64 = 1e150;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Reference state whose value normalizes RVI iterates.
    pub x0: usize,
    /// Stop when the span (RVI) or sup norm (VI) of the log-increment drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Known eigenvalue; only used by [`solve_vi`].
    pub lambda: Option<f64>,
    pub log_space: bool,
    /// Starting iterate; defaults to the constant one.
    pub initial: Option<ValueFunction>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            x0: 0,
            tol: 1e-10,
            max_iter: 1_000_000,
            lambda: None,
            log_space: false,
            initial: None,
        }
    }
}

impl SolverConfig {
    pub fn with_x0(mut self, x0: usize) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_log_space(mut self, log_space: bool) -> Self {
        self.log_space = log_space;
        self
    }

    pub fn with_initial(mut self, initial: ValueFunction) -> Self {
        self.initial = Some(initial);
        self
    }

    pub fn check(&self, n_states: usize) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.x0 >= n_states {
            return Err(Error::Config(format!(
                "x0 = {} out of range for {n_states} states",
                self.x0
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if let Some(v) = &self.initial {
            v.check_len(n_states)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RelativeValueIteration,
    ValueIteration,
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Value of the new iterate at the reference state.
    pub v_x0: f64,
    pub span_log_increment: f64,
    pub policy_changes: usize,
    /// Collatz–Wielandt bounds of the iterate this step was applied to.
    pub cw_lower: f64,
    pub cw_upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub method: Method,
    pub lambda_est: f64,
    pub value: ValueFunction,
    pub policy: Policy,
    pub converged: bool,
    /// Value iteration only: an iterate left the `[1e-150, 1e150]` window.
    pub diverged: bool,
    pub iterations: usize,
    pub cw_lower: f64,
    pub cw_upper: f64,
    pub x0: usize,
    pub trace: Vec<TraceRecord>,
}

impl SolveReport {
    /// Trace as CSV with columns `iter,v_x0,span_log_increment,policy_changes`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,v_x0,span_log_increment,policy_changes\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{:?},{:?},{}\n",
                r.iter, r.v_x0, r.span_log_increment, r.policy_changes
            ));
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Normalizer {
    Reference(usize),
    Fixed(f64),
}

/// Relative value iteration from `V_0` (default: all ones) until the span of
/// `log V_{n+1} - log V_n` drops below `tol`. Non-convergence is reported
/// through `converged = false`, not as an error.
pub fn solve_rvi(model: &ChainModel, config: &SolverConfig) -> Result<SolveReport> {
    config.check(model.n_states())?;
    iterate(model, config, Normalizer::Reference(config.x0))
}

/// Value iteration `J_{n+1} = T J_n / lambda` with a caller-supplied eigenvalue.
/// Converges (sup norm of the log-increment below `tol`) only when `lambda`
/// is the true eigenvalue; otherwise the iterates drift to 0 or infinity and
/// the run stops with `diverged = true`.
pub fn solve_vi(model: &ChainModel, config: &SolverConfig) -> Result<SolveReport> {
    config.check(model.n_states())?;
    let lambda = config
        .lambda
        .ok_or_else(|| Error::Config("value iteration needs lambda".into()))?;
    iterate(model, config, Normalizer::Fixed(lambda))
}

fn iterate(model: &ChainModel, config: &SolverConfig, norm: Normalizer) -> Result<SolveReport> {
    let n = model.n_states();
    let x0 = config.x0;
    let log_space = config.log_space;
    let initial: Vec<f64> = match &config.initial {
        Some(v) => v.values().to_vec(),
        None => vec![1.0; n],
    };
    // In log space `cur` holds log V_n.
    let mut cur: Vec<f64> = if log_space {
        initial.iter().map(|v| v.ln()).collect()
    } else {
        initial
    };
    let mut image = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut greedy = vec![0usize; n];
    let mut prev_greedy: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let (log_lo, log_hi) = (-DIVERGENCE_BOUND.ln(), DIVERGENCE_BOUND.ln());

    for iter in 1..=config.max_iter {
        let (cw_lower, cw_upper, inc_lo, inc_hi);
        if log_space {
            apply_log(model, &cur, &mut image, &mut greedy);
            let shift = match norm {
                Normalizer::Reference(x) => cur[x],
                Normalizer::Fixed(l) => l.ln(),
            };
            let (mut rlo, mut rhi) = (f64::INFINITY, f64::NEG_INFINITY);
            for x in 0..n {
                let r = image[x] - cur[x];
                rlo = rlo.min(r);
                rhi = rhi.max(r);
                next[x] = image[x] - shift;
            }
            cw_lower = rlo.exp();
            cw_upper = rhi.exp();
            inc_lo = rlo - shift;
            inc_hi = rhi - shift;
        } else {
            apply_linear(model, &cur, &mut image, &mut greedy)?;
            let divisor = match norm {
                Normalizer::Reference(x) => cur[x],
                Normalizer::Fixed(l) => l,
            };
            for x in 0..n {
                next[x] = image[x] / divisor;
            }
            (cw_lower, cw_upper) = ratio_bounds(&image, &cur);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for x in 0..n {
                let d = (next[x] / cur[x]).ln();
                lo = lo.min(d);
                hi = hi.max(d);
            }
            inc_lo = lo;
            inc_hi = hi;
            if matches!(norm, Normalizer::Reference(_)) {
                check_positive(&next)?;
            }
        }

        let policy_changes = prev_greedy
            .as_ref()
            .map_or(0, |p| p.iter().zip(&greedy).filter(|(a, b)| a != b).count());
        let v_x0 = if log_space { next[x0].exp() } else { next[x0] };
        let span = inc_hi - inc_lo;
        trace.push(TraceRecord {
            iter,
            v_x0,
            span_log_increment: span,
            policy_changes,
            cw_lower,
            cw_upper,
        });
        prev_greedy = Some(greedy.clone());

        if let Normalizer::Fixed(_) = norm {
            let (lo, hi) = next
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            let out = if log_space {
                lo < log_lo || hi > log_hi
            } else {
                lo < 1.0 / DIVERGENCE_BOUND || hi > DIVERGENCE_BOUND
            };
            if out {
                diverged = true;
                break;
            }
        }

        std::mem::swap(&mut cur, &mut next);

        let done = match norm {
            Normalizer::Reference(_) => span < config.tol,
            Normalizer::Fixed(_) => inc_lo.abs().max(inc_hi.abs()) < config.tol,
        };
        if done {
            converged = true;
            break;
        }
    }

    let value = if log_space {
        let v: Vec<f64> = cur.iter().map(|l| l.exp()).collect();
        check_positive(&v)?;
        v
    } else {
        cur
    };
    let lambda_est = match norm {
        Normalizer::Reference(x) => value[x],
        Normalizer::Fixed(l) => l,
    };
    let last = trace.last().expect("max_iter >= 1");
    Ok(SolveReport {
        method: match norm {
            Normalizer::Reference(_) => Method::RelativeValueIteration,
            Normalizer::Fixed(_) => Method::ValueIteration,
        },
        lambda_est,
        cw_lower: last.cw_lower,
        cw_upper: last.cw_upper,
        value: ValueFunction::new(value)?,
        policy: Policy::new(greedy),
        converged,
        diverged,
        iterations: trace.len(),
        x0,
        trace,
    })
}

/// Per-step bookkeeping of the VI/RVI coupling `V_n = C_n J_n`.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingStep {
    pub n: usize,
    pub max_ratio: f64,
    pub min_ratio: f64,
    /// `C_n`, read off at the reference state.
    pub c_n: f64,
    /// `|C_n - prod_{m<n} lambda / V_m(x0)|`.
    pub product_residual: f64,
    /// `|C_n - lambda / J_{n-1}(x0)|`; absent at `n = 0`.
    pub x0_residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingDiagnostic {
    pub steps: Vec<CouplingStep>,
    /// Largest `max_ratio / min_ratio - 1` over all steps.
    pub max_ratio_spread: f64,
    pub max_product_residual: f64,
    pub max_x0_residual: f64,
}

/// Runs VI (with the trusted `lambda`) and RVI side by side from the same
/// start and records how closely `V_n / J_n` stays a spatial constant that
/// follows the product formula.
pub fn coupling_check(
    model: &ChainModel,
    v0: &ValueFunction,
    lambda: f64,
    x0: usize,
    n_steps: usize,
) -> Result<CouplingDiagnostic> {
    let n = model.n_states();
    v0.check_len(n)?;
    SolverConfig::default()
        .with_x0(x0)
        .with_lambda(lambda)
        .check(n)?;
    let mut j = v0.values().to_vec();
    let mut v = j.clone();
    let mut tj = vec![0.0; n];
    let mut tv = vec![0.0; n];
    let mut gj = vec![0; n];
    let mut gv = vec![0; n];
    let mut product = 1.0;
    let mut prev_j_x0: Option<f64> = None;
    let mut steps = Vec::with_capacity(n_steps + 1);

    for step in 0..=n_steps {
        let (min_ratio, max_ratio) = ratio_bounds(&v, &j);
        let c_n = v[x0] / j[x0];
        steps.push(CouplingStep {
            n: step,
            max_ratio,
            min_ratio,
            c_n,
            product_residual: (c_n - product).abs(),
            x0_residual: prev_j_x0.map(|jx| (c_n - lambda / jx).abs()),
        });
        if step == n_steps {
            break;
        }
        apply_linear(model, &j, &mut tj, &mut gj)?;
        apply_linear(model, &v, &mut tv, &mut gv)?;
        product *= lambda / v[x0];
        prev_j_x0 = Some(j[x0]);
        let norm = v[x0];
        for x in 0..n {
            j[x] = tj[x] / lambda;
            v[x] = tv[x] / norm;
        }
        check_positive(&j)?;
        check_positive(&v)?;
    }

    let max_ratio_spread = steps
        .iter()
        .map(|s| s.max_ratio / s.min_ratio - 1.0)
        .fold(0.0, f64::max);
    let max_product_residual = steps.iter().map(|s| s.product_residual).fold(0.0, f64::max);
    let max_x0_residual = steps
        .iter()
        .filter_map(|s| s.x0_residual)
        .fold(0.0, f64::max);
    Ok(CouplingDiagnostic {
        steps,
        max_ratio_spread,
        max_product_residual,
        max_x0_residual,
    })
}
