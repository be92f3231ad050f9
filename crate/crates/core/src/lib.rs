//! Nuclear-norm constrained matrix-variate Gaussian processes.
//!
//! The model predicts entries of a partially observed matrix whose rows and
//! columns both carry side information in the form of prior covariances
//! (usually diffusion kernels over a graph). The posterior mean is
//! re-parameterized through kernel bases `C = G Gᵀ` as
//! `ψ(m, n) = G_M(m) · B · G_N(n)ᵀ` and `B` is estimated by minimizing
//!
//! ```text
//! 1/(2σ²) Σ_L (y - G_M B G_Nᵀ)² + w/2 ‖B‖_F² + λ ‖B‖_*
//! ```
//!
//! Modules:
//!
//! * [`kernels`]: graphs, normalized Laplacians, diffusion kernels, bases.
//! * [`solver`]: mean-function solvers (exact proximal and rank-incremental
//!   factored), closed-form GP posteriors and hyperparameter updates.
//! * [`coninf`]: small dense Gaussian projections used to check the solver.
//! * [`data`]: triple files, cross-validation folds, negative sampling.
//! * [`metrics`]: precision@k, recall@k, RMSE.
//! * [`experiment`]: configuration, cross-validation driver and reports.

pub mod coninf;
pub mod data;
mod error;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod solver;

pub use error::{Error, Result};
