//! Mean-function solvers, closed-form GP posteriors and hyperparameter updates.
//!
//! Two solvers minimize the same convex objective over the parameter matrix
//! `B`:
//!
//! * [`fit_exact_prox`] holds `B` densely and runs accelerated proximal
//!   gradient with singular value thresholding. It is the reference.
//! * [`fit_factored`] grows `B = P Qᵀ` one rank at a time from the top
//!   singular pair of the gradient and refines the factors with L-BFGS.

mod factored;
mod gp;
mod hyper;
mod lbfgs;
mod model;
mod problem;
mod prox;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use factored::{fit_factored, top_singular_pair, SingularPair};
pub use gp::{gp_posterior_covariance, gp_posterior_mean_exact, observed_covariance};
pub use hyper::{
    covariance_hyperparam_gradient, hyperparam_objective_terms, posterior_trace_observed,
    update_noise_variance, DiffusionFamily, KroneckerRowFamily, ParametricKernel,
};
pub use lbfgs::{minimize as lbfgs_minimize, LbfgsOptions, LbfgsOutcome};
pub use model::{objective, predict_mean, FitDiagnostics, MeanModel, MODEL_FORMAT_VERSION};
pub use problem::{smooth_gradient, smooth_value, Problem};
pub use prox::{fit_exact_prox, fit_exact_prox_from, ProxOutcome};
pub(crate) use prox::accelerated_prox as accelerated_prox_dense;

/// Observed entries `(m, n, y)` of an `n_rows × n_cols` matrix.
///
/// Entries are kept sorted by `(m, n)`; repeated indices are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl ObservationSet {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for (m, n, y) in entries {
            if m >= n_rows || n >= n_cols {
                return Err(Error::input(format!(
                    "observation ({m}, {n}) outside {n_rows}x{n_cols} grid"
                )));
            }
            if !y.is_finite() {
                return Err(Error::input(format!("observation ({m}, {n}) is not finite")));
            }
            let slot = acc.entry((m, n)).or_insert((0.0, 0));
            slot.0 += y;
            slot.1 += 1;
        }
        let entries = acc
            .into_iter()
            .map(|((m, n), (sum, count))| (m, n, if count == 1 { sum } else { sum / count as f64 }))
            .collect();
        Ok(Self { n_rows, n_cols, entries })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new(n_rows, n_cols, std::iter::empty())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|&(m, n, _)| (m, n)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.2).collect()
    }

    /// Entries at the given positions of [`Self::entries`].
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let mut picked = Vec::with_capacity(positions.len());
        for &p in positions {
            let e = self
                .entries
                .get(p)
                .ok_or_else(|| Error::input(format!("entry position {p} out of range")))?;
            picked.push(*e);
        }
        Self::new(self.n_rows, self.n_cols, picked)
    }

    /// Same entries on a larger grid.
    pub fn with_grid(&self, n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new(n_rows, n_cols, self.entries.iter().copied())
    }

    /// Sorted distinct rows that carry at least one observation.
    pub fn observed_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        rows.dedup();
        rows
    }
}

/// Which solver [`fit_mean`] dispatches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    #[default]
    Factored,
    Exact,
}

impl SolverMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverMethod::Factored => "factored",
            SolverMethod::Exact => "exact",
        }
    }
}

pub fn fit_mean(
    method: SolverMethod,
    obs: &ObservationSet,
    row_basis: &crate::kernels::BasisFactor,
    col_basis: &crate::kernels::BasisFactor,
    params: FitParams,
    options: &FitOptions,
) -> Result<MeanModel> {
    match method {
        SolverMethod::Factored => fit_factored(obs, row_basis, col_basis, params, options),
        SolverMethod::Exact => fit_exact_prox(obs, row_basis, col_basis, params, options),
    }
}

fn require_observations(obs: &ObservationSet) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::input("cannot fit without observations"));
    }
    Ok(())
}

/// Regularization and noise hyperparameters of the mean model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    /// Nuclear norm weight λ.
    pub lambda: f64,
    /// Noise variance σ².
    pub noise_var: f64,
    /// Whether the `½‖B‖_F²` term is present (Con. MV-GP) or not (Trace GP).
    pub frobenius: bool,
}

impl FitParams {
    pub fn new(lambda: f64, noise_var: f64, frobenius: bool) -> Result<Self> {
        let params = Self { lambda, noise_var, frobenius };
        params.validate()?;
        Ok(params)
    }

    pub fn frobenius_weight(&self) -> f64 {
        if self.frobenius {
            1.0
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(Error::input(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        if !self.frobenius && self.lambda == 0.0 {
            return Err(Error::input(
                "a model without the Frobenius term needs lambda > 0",
            ));
        }
        Ok(())
    }
}

/// Iteration limits and tolerances shared by both solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Proximal iterations for the exact solver; rank/refine rounds for the
    /// factored one.
    pub max_outer_iters: usize,
    /// Rank cap for the factored solver; `None` means `min(D_M, D_N)`.
    pub max_rank: Option<usize>,
    pub objective_rel_tol: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    /// L-BFGS iteration cap per refinement.
    pub inner_iters: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 5000,
            max_rank: None,
            objective_rel_tol: 1e-6,
            power_iters: 30,
            power_tol: 1e-7,
            inner_iters: 500,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.power_iters == 0 || self.inner_iters == 0 {
            return Err(Error::input("iteration caps must be positive"));
        }
        if self.max_rank == Some(0) {
            return Err(Error::input("max_rank must be positive"));
        }
        if !(self.objective_rel_tol > 0.0 && self.power_tol > 0.0) {
            return Err(Error::input("tolerances must be positive"));
        }
        Ok(())
    }
}
