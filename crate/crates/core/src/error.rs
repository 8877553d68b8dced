use thiserror::Error;

use crate::expr::ExprError;
use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed problem document: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {}", join_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("policy has {got} entries but the model has {expected} states")]
    PolicyLength { got: usize, expected: usize },

    #[error(
        "policy selects action {action} at state {state}, but the model has {n_actions} actions"
    )]
    PolicyOutOfRange {
        state: usize,
        action: usize,
        n_actions: usize,
    },

    #[error("minimum probability {delta} is infeasible for {n_states} states")]
    InfeasibleDelta { delta: f64, n_states: usize },

    #[error("value at state {state} must be strictly positive and finite, got {value}")]
    NonPositiveValue { state: usize, value: f64 },

    #[error("overflow at state {state}; rerun in log space")]
    Overflow { state: usize },

    #[error("underflow at state {state}; rerun in log space")]
    Underflow { state: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "power iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    OracleNotConverged { iterations: usize, residual: f64 },

    #[error("solver did not converge after {iterations} iterations")]
    SolverNotConverged { iterations: usize },

    #[error("enumerating {count} policies exceeds the cap of {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("dense eigensolver is limited to {cap} states, model has {n_states}")]
    SizeCap { n_states: usize, cap: usize },

    #[error("CFL condition violated at state {state} (action {action}): self-loop probability {self_loop}")]
    Cfl {
        state: usize,
        action: usize,
        self_loop: f64,
    },

    #[error("diffusion is not elliptic at state {state}: sigma_{axis} = {value}")]
    NotElliptic {
        state: usize,
        axis: usize,
        value: f64,
    },

    #[error("non-finite {what} at state {state} (action {action})")]
    NonFinite {
        what: &'static str,
        state: usize,
        action: usize,
    },

    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("iterate became non-positive at state {state} on step {step}; reduce dt")]
    NegativeIterate { state: usize, step: usize },

    #[error("eigen-triple rejected: residual {residual:e} exceeds {limit:e}")]
    InvalidTriple { residual: f64, limit: f64 },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
