//! Continuous normalizing flow driven by the gradient of a scalar potential,
//! with optimal-transport and Hamilton-Jacobi-Bellman regularization.
//!
//! The flow maps an unknown data density to a standard normal by integrating
//! `zdot = -grad Phi(z, t)` with a fixed-step RK4 solver, accumulating the
//! log-determinant from an exact Hessian-trace kernel, an `L2` transport cost,
//! and an HJB residual penalty along the way. Training differentiates the
//! unrolled discretization exactly (discretize-then-optimize) through a small
//! reverse-mode tape. Evaluation covers negative log-likelihood, maximum mean
//! discrepancy against generated samples, and the forward/inverse composition
//! residual.
//!
//! Module map:
//! - [`potential`]: the potential, its analytic gradient, exact Hessian trace,
//!   and a Hutchinson estimator with analytic Hessian-vector products.
//! - [`autodiff`]: the reverse-mode tape and the recorded training objective.
//! - [`flow`]: batched RK4 integration of the augmented system, both
//!   directions.
//! - [`objective`]: loss components and the KL self-consistency check.
//! - [`trainer`]: ADAM loop, validation on a finer time grid, checkpoints.
//! - [`metrics`]: MMD, inverse error, bootstrap confidence intervals.
//! - [`data`]: toy 2-D samplers, latent sampling, CSV ingestion with
//!   standardization.
//! - [`bench`]: trace-kernel timing and estimator-error study.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod potential;
pub mod runconfig;
pub mod trainer;

pub use error::{Error, Result};
