//! The multiplicative Bellman operator
//!
//! `T J(x) = min_u e^{k(x,u)} sum_y p(y | x, u) J(y)`
//!
//! and the one-step maps and certificates built on it. Every row reduction
//! runs over next states in ascending index order, and argmin ties go to the
//! lowest action index, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ChainModel, Policy, ValueFunction};

/// Sweeps touching at least this many transition entries run on the rayon pool.
const PAR_MIN_NNZ: usize = 1 << 16;

#[inline]
fn row_min_linear(model: &ChainModel, j: &[f64], x: usize) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for u in 0..model.n_actions() {
        let (cols, probs) = model.row(x, u);
        let mut s = 0.0;
        for (&y, &p) in cols.iter().zip(probs) {
            s += p * j[y];
        }
        let val = model.cost(x, u).exp() * s;
        if val < best || u == 0 {
            best = val;
            arg = u;
        }
    }
    (best, arg)
}

#[inline]
fn row_min_log(model: &ChainModel, log_j: &[f64], x: usize) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for u in 0..model.n_actions() {
        let (cols, probs) = model.row(x, u);
        let mut top = f64::NEG_INFINITY;
        for (&y, &p) in cols.iter().zip(probs) {
            if p > 0.0 && log_j[y] > top {
                top = log_j[y];
            }
        }
        let mut s = 0.0;
        for (&y, &p) in cols.iter().zip(probs) {
            s += p * (log_j[y] - top).exp();
        }
        let val = model.cost(x, u) + top + s.ln();
        if val < best || u == 0 {
            best = val;
            arg = u;
        }
    }
    (best, arg)
}

fn sweep<F>(model: &ChainModel, out: &mut [f64], greedy: &mut [usize], f: F)
where
    F: Fn(usize) -> (f64, usize) + Sync,
{
    if model.nnz() >= PAR_MIN_NNZ {
        out.par_iter_mut()
            .zip(greedy.par_iter_mut())
            .enumerate()
            .with_min_len(64)
            .for_each(|(x, (o, g))| {
                let (v, a) = f(x);
                *o = v;
                *g = a;
            });
    } else {
        for (x, (o, g)) in out.iter_mut().zip(greedy.iter_mut()).enumerate() {
            let (v, a) = f(x);
            *o = v;
            *g = a;
        }
    }
}

/// Linear-domain sweep: writes `T j` into `out` and the minimizers into `greedy`.
pub(crate) fn apply_linear(
    model: &ChainModel,
    j: &[f64],
    out: &mut [f64],
    greedy: &mut [usize],
) -> Result<()> {
    sweep(model, out, greedy, |x| row_min_linear(model, j, x));
    check_positive(out)
}

/// Log-domain sweep: `out = log T(exp(log_j))`, via per-row max extraction.
pub(crate) fn apply_log(model: &ChainModel, log_j: &[f64], out: &mut [f64], greedy: &mut [usize]) {
    sweep(model, out, greedy, |x| row_min_log(model, log_j, x));
}

pub(crate) fn check_positive(values: &[f64]) -> Result<()> {
    for (state, &v) in values.iter().enumerate() {
        if v.is_infinite() || v.is_nan() {
            return Err(Error::Overflow { state });
        }
        if v <= 0.0 {
            return Err(Error::Underflow { state });
        }
    }
    Ok(())
}

fn check_input(model: &ChainModel, j: &ValueFunction) -> Result<()> {
    j.check_len(model.n_states())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "eigenvalue must be positive and finite, got {lambda}"
        )))
    }
}

/// Applies `T` once. Returns `T J` and the greedy selector (lowest index on ties).
pub fn bellman_min(model: &ChainModel, j: &ValueFunction) -> Result<(ValueFunction, Policy)> {
    check_input(model, j)?;
    let n = model.n_states();
    let mut out = vec![0.0; n];
    let mut greedy = vec![0; n];
    apply_linear(model, j.values(), &mut out, &mut greedy)?;
    Ok((ValueFunction::from_unchecked(out), Policy::new(greedy)))
}

/// One value-iteration step with a known eigenvalue: `T J / lambda`.
pub fn vi_step(model: &ChainModel, j: &ValueFunction, lambda: f64) -> Result<ValueFunction> {
    check_lambda(lambda)?;
    let (tj, _) = bellman_min(model, j)?;
    let out: Vec<f64> = tj.values().iter().map(|v| v / lambda).collect();
    check_positive(&out)?;
    Ok(ValueFunction::from_unchecked(out))
}

/// One relative-value-iteration step: `(T V / V(x0), V(x0))`.
pub fn rvi_step(model: &ChainModel, v: &ValueFunction, x0: usize) -> Result<(ValueFunction, f64)> {
    if x0 >= model.n_states() {
        return Err(Error::Config(format!(
            "reference state {x0} out of range for {} states",
            model.n_states()
        )));
    }
    let (tv, _) = bellman_min(model, v)?;
    let norm = v[x0];
    let out: Vec<f64> = tv.values().iter().map(|t| t / norm).collect();
    check_positive(&out)?;
    Ok((ValueFunction::from_unchecked(out), norm))
}

/// Collatz–Wielandt bounds `(min_x TV/V, max_x TV/V)`; the eigenvalue lies in between.
pub fn cw_bounds(model: &ChainModel, v: &ValueFunction) -> Result<(f64, f64)> {
    let (tv, _) = bellman_min(model, v)?;
    Ok(ratio_bounds(tv.values(), v.values()))
}

pub(crate) fn ratio_bounds(num: &[f64], den: &[f64]) -> (f64, f64) {
    num.iter()
        .zip(den)
        .map(|(a, b)| a / b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r), hi.max(r))
        })
}

/// Relative residual of the eigen-equation: `max_x |TV(x) - lambda V(x)| / (lambda V(x))`.
pub fn dp_residual(model: &ChainModel, v: &ValueFunction, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let (tv, _) = bellman_min(model, v)?;
    Ok(tv
        .values()
        .iter()
        .zip(v.values())
        .map(|(t, vx)| (t - lambda * vx).abs() / (lambda * vx))
        .fold(0.0, f64::max))
}

/// Residual of the eigen-equation along a fixed policy (no minimization).
pub fn policy_residual(
    model: &ChainModel,
    policy: &Policy,
    v: &ValueFunction,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    policy.check_for(model)?;
    check_input(model, v)?;
    let vals = v.values();
    let mut worst: f64 = 0.0;
    for (x, &u) in policy.actions().iter().enumerate() {
        let (cols, probs) = model.row(x, u);
        let s: f64 = cols.iter().zip(probs).map(|(&y, &p)| p * vals[y]).sum();
        let t = model.cost(x, u).exp() * s;
        worst = worst.max((t - lambda * vals[x]).abs() / (lambda * vals[x]));
    }
    Ok(worst)
}

/// Ground-state transform of the kernel under `policy`.
#[derive(Debug, Clone, Serialize)]
pub struct TwistedKernel {
    /// Dense `[x][y]` matrix of `p*(y | x)`.
    pub matrix: Vec<Vec<f64>>,
    /// `max_x |sum_y p*(y | x) - 1|`.
    pub max_row_deviation: f64,
}

/// `p*(y|x) = e^{k(x,v(x))} p(y|x,v(x)) V(y) / (lambda V(x))`; stochastic
/// exactly when `(lambda, V, v)` solves the eigen-equation.
pub fn twisted_kernel(
    model: &ChainModel,
    v: &ValueFunction,
    lambda: f64,
    policy: &Policy,
) -> Result<TwistedKernel> {
    check_lambda(lambda)?;
    policy.check_for(model)?;
    check_input(model, v)?;
    let n = model.n_states();
    let vals = v.values();
    let mut matrix = Vec::with_capacity(n);
    let mut max_row_deviation: f64 = 0.0;
    for (x, &u) in policy.actions().iter().enumerate() {
        let scale = model.cost(x, u).exp() / (lambda * vals[x]);
        let mut row = vec![0.0; n];
        let (cols, probs) = model.row(x, u);
        let mut sum = 0.0;
        for (&y, &p) in cols.iter().zip(probs) {
            row[y] = scale * p * vals[y];
            sum += row[y];
        }
        max_row_deviation = max_row_deviation.max((sum - 1.0).abs());
        matrix.push(row);
    }
    Ok(TwistedKernel {
        matrix,
        max_row_deviation,
    })
}
