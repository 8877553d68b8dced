//! Ground truth for the chain eigenvalue.
//!
//! If `lambda V = T V` has a positive solution, then `lambda V <= Q_v V` for
//! every stationary policy `v`, where `Q_v(x, y) = e^{k(x, v(x))} p(y | x, v(x))`,
//! and equality holds at the minimizing selector. By Collatz–Wielandt this makes
//! `lambda` the minimum over policies of the Perron root of `Q_v`, which is what
//! [`enumerate_min`] computes by brute force.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ChainModel, Policy, ValueFunction};

/// Default cap on the number of policies [`enumerate_min`] will visit.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Largest chain handed to the dense eigensolver.
pub const DENSE_CAP: usize = 50;

#[derive(Debug, Clone)]
pub struct PerronOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates are normalized to one at this state.
    pub x0: usize,
}

impl Default for PerronOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iter: 1_000_000,
            x0: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerronResult {
    pub rho: f64,
    pub eigvec: ValueFunction,
    pub iterations: usize,
    /// `max_x |Q v - rho v| / (rho v)`.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnumerationResult {
    pub lambda_star: f64,
    pub best_policy: Policy,
    pub n_policies: u128,
}

/// Applies `Q_v` to `v` in ascending state order.
fn apply_policy(model: &ChainModel, policy: &[usize], v: &[f64], out: &mut [f64]) {
    for (x, (&u, o)) in policy.iter().zip(out.iter_mut()).enumerate() {
        let (cols, probs) = model.row(x, u);
        let mut s = 0.0;
        for (&y, &p) in cols.iter().zip(probs) {
            s += p * v[y];
        }
        *o = model.cost(x, u).exp() * s;
    }
}

fn residual_of(qv: &[f64], v: &[f64], rho: f64) -> f64 {
    qv.iter()
        .zip(v)
        .map(|(a, b)| (a - rho * b).abs() / (rho * b))
        .fold(0.0, f64::max)
}

/// Perron root of `Q_v` by power iteration, normalizing to one at `opts.x0`.
pub fn policy_perron(
    model: &ChainModel,
    policy: &Policy,
    opts: &PerronOptions,
) -> Result<PerronResult> {
    policy.check_for(model)?;
    let n = model.n_states();
    if opts.x0 >= n {
        return Err(Error::Config(format!("x0 = {} out of range", opts.x0)));
    }
    let acts = policy.actions();
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        apply_policy(model, acts, &v, &mut w);
        let rho = w[opts.x0] / v[opts.x0];
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Overflow { state: opts.x0 });
        }
        residual = residual_of(&w, &v, rho);
        if residual <= opts.tol {
            return Ok(PerronResult {
                rho,
                eigvec: ValueFunction::new(v)?,
                iterations: iter,
                residual,
            });
        }
        let norm = w[opts.x0];
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    Err(Error::OracleNotConverged {
        iterations: opts.max_iter,
        residual,
    })
}

/// Decodes the `index`-th policy in lexicographic order (state 0 most significant).
fn policy_at(mut index: u128, n_states: usize, n_actions: usize) -> Vec<usize> {
    let mut out = vec![0; n_states];
    for slot in out.iter_mut().rev() {
        *slot = (index % n_actions as u128) as usize;
        index /= n_actions as u128;
    }
    out
}

fn policy_count(n_states: usize, n_actions: usize) -> Option<u128> {
    (n_actions as u128).checked_pow(u32::try_from(n_states).ok()?)
}

/// Minimum Perron root over all deterministic stationary policies; ties go
/// to the lexicographically smallest policy.
pub fn enumerate_min(model: &ChainModel) -> Result<EnumerationResult> {
    enumerate_min_capped(model, &PerronOptions::default(), ENUMERATION_CAP)
}

pub fn enumerate_min_capped(
    model: &ChainModel,
    opts: &PerronOptions,
    cap: u128,
) -> Result<EnumerationResult> {
    let (n, m) = (model.n_states(), model.n_actions());
    let count = policy_count(n, m).unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let (rho, index) = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let p = Policy::new(policy_at(i as u128, n, m));
            policy_perron(model, &p, opts).map(|r| (r.rho, i))
        })
        .try_reduce(
            || (f64::INFINITY, u64::MAX),
            |a, b| {
                Ok(if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                })
            },
        )?;
    Ok(EnumerationResult {
        lambda_star: rho,
        best_policy: Policy::new(policy_at(index as u128, n, m)),
        n_policies: count,
    })
}

/// Perron root of `Q_v` from the full spectrum (real Schur form), with the
/// eigenvector recovered by inverse iteration. Independent of [`policy_perron`].
pub fn dense_perron(model: &ChainModel, policy: &Policy) -> Result<PerronResult> {
    policy.check_for(model)?;
    let n = model.n_states();
    if n > DENSE_CAP {
        return Err(Error::SizeCap {
            n_states: n,
            cap: DENSE_CAP,
        });
    }
    let q = DMatrix::from_fn(n, n, |x, y| {
        let u = policy.actions()[x];
        model.cost(x, u).exp() * model.prob(x, u, y)
    });
    let spectrum = q.clone().complex_eigenvalues();
    let lead = spectrum
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("non-empty matrix");
    let rho = lead.re;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::OracleNotConverged {
            iterations: 0,
            residual: f64::NAN,
        });
    }

    let shift = DMatrix::identity(n, n) * (rho * (1.0 + 1e-10));
    let lu = (&q - shift).lu();
    let mut v = DVector::from_element(n, 1.0);
    let mut iterations = 0;
    for _ in 0..4 {
        iterations += 1;
        let Some(w) = lu.solve(&v) else { break };
        let scale = w[0];
        v = w / scale;
    }
    let eig: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let qv = &q * DVector::from_vec(eig.clone());
    let residual = residual_of(qv.as_slice(), &eig, rho);
    Ok(PerronResult {
        rho,
        eigvec: ValueFunction::new(eig)?,
        iterations,
        residual,
    })
}
