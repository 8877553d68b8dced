//! Solvers for risk-sensitive (multiplicative cost) optimal control.
//!
//! * [`model`]: finite controlled Markov chains, policies, positive value functions.
//! * [`operator`] and [`rvi`]: the multiplicative Bellman operator, value
//!   iteration, relative value iteration and their certificates.
//! * [`oracle`]: independent Perron-root ground truth by policy enumeration.
//! * [`diffusion`]: Markov-chain approximation of controlled diffusions and
//!   parabolic value/relative value iteration on the grid.
//! * [`mc`]: Monte Carlo checks of the finite-horizon eigen-identities.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod expr;
pub mod mc;
pub mod model;
pub mod operator;
pub mod oracle;
pub mod rvi;

pub use diffusion::{
    build_chain, lambda_from_chain, load_diffusion, ou_model, ou_reference, ratio_diagnostic,
    run_parabolic_rvi, run_parabolic_vi, DiffusionModel, DiscretizedProblem, GridSpec, RviMode,
    Stencil,
};
pub use error::{Error, Result};
pub use mc::{
    chain_identity_check, sde_growth_estimate, sde_martingale_check, GridPolicy, McConfig, McReport,
};
pub use model::{
    load_model, random_model, restrict, validate, ChainModel, Policy, ValueFunction, Violation,
};
pub use operator::{bellman_min, cw_bounds, dp_residual, rvi_step, twisted_kernel, vi_step};
pub use rvi::{coupling_check, solve_rvi, solve_vi, SolveReport, SolverConfig};
