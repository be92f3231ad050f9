use nalgebra::{DMatrix, DVector};

use super::{FitParams, ObservationSet};
use crate::kernels::BasisFactor;
use crate::linalg::nuclear_norm;
use crate::{Error, Result};

/// A fitting problem: observations, row and column bases, hyperparameters.
///
/// Evaluates the smooth part
/// `f(B) = 1/(2σ²) Σ_L (y - G_M B G_Nᵀ)² + w/2 ‖B‖_F²`
/// and its gradient without forming anything of size `M × N`.
pub struct Problem<'a> {
    obs: &'a ObservationSet,
    gm: &'a DMatrix<f64>,
    gn: &'a DMatrix<f64>,
    // Transposed bases so that one basis row is one contiguous column.
    gm_t: DMatrix<f64>,
    gn_t: DMatrix<f64>,
    params: FitParams,
}

impl<'a> Problem<'a> {
    pub fn new(
        obs: &'a ObservationSet,
        row_basis: &'a BasisFactor,
        col_basis: &'a BasisFactor,
        params: FitParams,
    ) -> Result<Self> {
        params.validate()?;
        if row_basis.rows() < obs.n_rows() || col_basis.rows() < obs.n_cols() {
            return Err(Error::input(format!(
                "bases cover {}x{} indices but observations live on a {}x{} grid",
                row_basis.rows(),
                col_basis.rows(),
                obs.n_rows(),
                obs.n_cols()
            )));
        }
        let gm = row_basis.values();
        let gn = col_basis.values();
        Ok(Self {
            obs,
            gm,
            gn,
            gm_t: gm.transpose(),
            gn_t: gn.transpose(),
            params,
        })
    }

    pub fn params(&self) -> &FitParams {
        &self.params
    }

    pub fn observations(&self) -> &ObservationSet {
        self.obs
    }

    pub fn row_dim(&self) -> usize {
        self.gm.ncols()
    }

    pub fn col_dim(&self) -> usize {
        self.gn.ncols()
    }

    pub(crate) fn gm(&self) -> &DMatrix<f64> {
        self.gm
    }

    pub(crate) fn gn(&self) -> &DMatrix<f64> {
        self.gn
    }

    fn check_dense(&self, b: &DMatrix<f64>) -> Result<()> {
        if b.shape() != (self.row_dim(), self.col_dim()) {
            return Err(Error::input(format!(
                "parameter matrix is {}x{}, bases need {}x{}",
                b.nrows(),
                b.ncols(),
                self.row_dim(),
                self.col_dim()
            )));
        }
        Ok(())
    }

    /// `(G_M B G_Nᵀ)_{mn}` at every observed entry.
    pub fn predictions_dense(&self, b: &DMatrix<f64>) -> Vec<f64> {
        // column m of (G_M B)ᵀ = Bᵀ G_M(m)ᵀ
        let t = b.tr_mul(&self.gm_t);
        self.obs
            .entries()
            .iter()
            .map(|&(m, n, _)| t.column(m).dot(&self.gn_t.column(n)))
            .collect()
    }

    /// Predictions at observed entries for `B = P Qᵀ`.
    pub fn predictions_factors(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<f64> {
        if p.ncols() == 0 {
            return vec![0.0; self.obs.len()];
        }
        let a_t = p.tr_mul(&self.gm_t);
        let b_t = q.tr_mul(&self.gn_t);
        self.obs
            .entries()
            .iter()
            .map(|&(m, n, _)| a_t.column(m).dot(&b_t.column(n)))
            .collect()
    }

    pub fn data_term(&self, predictions: &[f64]) -> f64 {
        let sse: f64 = self
            .obs
            .entries()
            .iter()
            .zip(predictions)
            .map(|(&(_, _, y), &p)| (y - p) * (y - p))
            .sum();
        sse / (2.0 * self.params.noise_var)
    }

    /// Scaled residuals `(ψ_l - y_l) / σ²`, the weights of the sparse
    /// residual matrix in the gradient.
    pub fn scaled_residuals(&self, predictions: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.params.noise_var;
        self.obs
            .entries()
            .iter()
            .zip(predictions)
            .map(|(&(_, _, y), &p)| (p - y) * inv)
            .collect()
    }

    /// `G_Mᵀ R G_N` for the sparse matrix `R` with the given entry weights.
    pub fn residual_product(&self, weights: &[f64]) -> DMatrix<f64> {
        let mut acc_t = DMatrix::zeros(self.col_dim(), self.obs.n_rows());
        for (&(m, n, _), &w) in self.obs.entries().iter().zip(weights) {
            if w != 0.0 {
                acc_t.column_mut(m).axpy(w, &self.gn_t.column(n), 1.0);
            }
        }
        // acc = R G_N  (M × D_N); result = G_Mᵀ acc
        let gm_rows = self.gm.rows(0, acc_t.ncols());
        gm_rows.tr_mul(&acc_t.transpose())
    }

    /// `G_Mᵀ R (G_N v)`.
    pub fn residual_apply(&self, weights: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let gv = self.gn * v;
        let mut rv = DVector::zeros(self.gm.nrows());
        for (&(m, n, _), &w) in self.obs.entries().iter().zip(weights) {
            rv[m] += w * gv[n];
        }
        self.gm.tr_mul(&rv)
    }

    /// `G_Nᵀ Rᵀ (G_M u)`.
    pub fn residual_apply_t(&self, weights: &[f64], u: &DVector<f64>) -> DVector<f64> {
        let gu = self.gm * u;
        let mut ru = DVector::zeros(self.gn.nrows());
        for (&(m, n, _), &w) in self.obs.entries().iter().zip(weights) {
            ru[n] += w * gu[m];
        }
        self.gn.tr_mul(&ru)
    }

    /// Data term at `B = P Qᵀ` with its gradients with respect to `P` and `Q`.
    pub fn factor_data_grads(
        &self,
        p: &DMatrix<f64>,
        q: &DMatrix<f64>,
    ) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let r = p.ncols();
        let (rows, cols) = (self.obs.n_rows(), self.obs.n_cols());
        let a_t = p.tr_mul(&self.gm_t.columns(0, rows));
        let b_t = q.tr_mul(&self.gn_t.columns(0, cols));
        let inv = 1.0 / self.params.noise_var;
        let mut sse = 0.0;
        let mut x_t = DMatrix::zeros(r, rows);
        let mut y_t = DMatrix::zeros(r, cols);
        for &(m, n, y) in self.obs.entries() {
            let resid = a_t.column(m).dot(&b_t.column(n)) - y;
            sse += resid * resid;
            let w = resid * inv;
            x_t.column_mut(m).axpy(w, &b_t.column(n), 1.0);
            y_t.column_mut(n).axpy(w, &a_t.column(m), 1.0);
        }
        let grad_p = (x_t * self.gm.rows(0, rows)).transpose();
        let grad_q = (y_t * self.gn.rows(0, cols)).transpose();
        (0.5 * sse * inv, grad_p, grad_q)
    }

    /// Smooth part value and gradient at a dense `B`.
    pub fn smooth_value_grad(&self, b: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        self.check_dense(b)?;
        let preds = self.predictions_dense(b);
        let w = self.params.frobenius_weight();
        let value = self.data_term(&preds) + 0.5 * w * b.norm_squared();
        let mut grad = self.residual_product(&self.scaled_residuals(&preds));
        if w != 0.0 {
            grad += b * w;
        }
        Ok((value, grad))
    }

    pub fn smooth_value_dense(&self, b: &DMatrix<f64>) -> Result<f64> {
        self.check_dense(b)?;
        let preds = self.predictions_dense(b);
        Ok(self.data_term(&preds) + 0.5 * self.params.frobenius_weight() * b.norm_squared())
    }

    /// Full objective at a dense `B`, nuclear norm by SVD.
    pub fn objective_dense(&self, b: &DMatrix<f64>) -> Result<f64> {
        let smooth = self.smooth_value_dense(b)?;
        let nuc = if self.params.lambda > 0.0 { nuclear_norm(b)? } else { 0.0 };
        Ok(smooth + self.params.lambda * nuc)
    }

    /// Upper bound on the Lipschitz constant of the smooth gradient:
    /// `‖G_M‖² ‖G_N‖² / σ² + w`.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        let sm = crate::linalg::spectral_norm(self.gm)?;
        let sn = crate::linalg::spectral_norm(self.gn)?;
        Ok(sm * sm * sn * sn / self.params.noise_var + self.params.frobenius_weight())
    }

    /// Dense `G_Mᵀ Y G_N / σ²` for the sparse observation matrix `Y`; its
    /// spectral norm is the smallest λ with `B* = 0`.
    pub fn zero_gradient_matrix(&self) -> DMatrix<f64> {
        let inv = 1.0 / self.params.noise_var;
        let weights: Vec<f64> = self.obs.entries().iter().map(|e| e.2 * inv).collect();
        self.residual_product(&weights)
    }
}

/// Smooth part of the objective at a dense parameter matrix.
pub fn smooth_value(problem: &Problem<'_>, b: &DMatrix<f64>) -> Result<f64> {
    problem.smooth_value_dense(b)
}

/// Gradient of the smooth part at a dense parameter matrix:
/// `G_Mᵀ R G_N / σ² + w B` with `R` the sparse residual matrix.
pub fn smooth_gradient(problem: &Problem<'_>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(problem.smooth_value_grad(b)?.1)
}
