//! Learn an unknown nonlinear differential operator `u_t = f(u, u_x, ...)`
//! from scattered measurements of several experiments, then solve new
//! initial-boundary value problems under the learned operator while
//! propagating the posterior uncertainty over the operator itself.
//!
//! The moving parts:
//!
//! * [`diffnet`] — sine-activation MLPs with exact spatial jets (derivatives
//!   up to third order) and reverse-mode parameter gradients.
//! * [`optim`] — Adam and a cosine learning-rate schedule.
//! * [`specgen`] — Fourier pseudospectral ETDRK4 ground-truth solver,
//!   periodic-GP initial conditions, dataset subsampling.
//! * [`gproot`] — Gaussian-process machinery for the operator: exact log
//!   marginal likelihood, sparse variational ELBO, sequential conditioning.
//! * [`model`] — the leaves-plus-root model and its three-stage training.
//! * [`pinn`] — physics-informed network solver for a deterministic operator.
//! * [`sampler`] — approximate operator samples via growing conditioning
//!   sets, alternated with PINN solves; solution ensembles with bands.
//! * [`harness`] — CLI commands, persistence, manifests, experiment drivers.

pub mod diffnet;
pub mod gproot;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod sidecar;
pub mod operator;
pub mod optim;
pub mod pinn;
pub mod rng;
pub mod sampler;
pub mod specgen;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("matrix not positive definite after jitter (leading minor {0})")]
    NotPositiveDefinite(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
