use nalgebra::{DMatrix, DVector};

use crate::kernels::KernelMatrix;
use crate::linalg::{spd_factor, symmetric_eigen};
use crate::{Error, Result};

/// Closed-form noise update `σ² = (Σ r² + tr S_L) / L`.
pub fn update_noise_variance(residuals: &[f64], trace_sl: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::input("noise update needs at least one residual"));
    }
    if !(trace_sl.is_finite() && trace_sl >= 0.0) {
        return Err(Error::input(format!("trace term must be nonnegative, got {trace_sl}")));
    }
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    let sigma2 = (sse + trace_sl) / residuals.len() as f64;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::numeric(format!("degenerate noise variance estimate {sigma2}")));
    }
    Ok(sigma2)
}

/// `tr S_L`: trace of the posterior covariance restricted to the observed
/// entries, `tr(C_L - C_L (C_L + σ² I)^{-1} C_L)`.
pub fn posterior_trace_observed(
    observed: &[(usize, usize)],
    c_row: &KernelMatrix,
    c_col: &KernelMatrix,
    noise_var: f64,
) -> Result<f64> {
    let cov = super::gp_posterior_covariance(observed, c_row, c_col, noise_var, observed)?;
    Ok(cov.trace())
}

/// A covariance family `C(ρ)` with its elementwise derivative.
pub trait ParametricKernel {
    fn dim(&self) -> usize;
    fn value(&self, rho: f64) -> Result<DMatrix<f64>>;
    fn derivative(&self, rho: f64) -> Result<DMatrix<f64>>;
}

/// Diffusion kernels `exp(-ρ L) + b I` parameterized by the rate `ρ`.
pub struct DiffusionFamily {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    b: f64,
}

impl DiffusionFamily {
    pub fn new(laplacian: &DMatrix<f64>, b: f64) -> Result<Self> {
        let eig = symmetric_eigen(laplacian)?;
        Ok(Self { eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors, b })
    }

    fn spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(k).scale_mut(f(lam));
        }
        let m = &scaled * self.eigenvectors.transpose();
        (&m + m.transpose()) * 0.5
    }
}

impl ParametricKernel for DiffusionFamily {
    fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn value(&self, rho: f64) -> Result<DMatrix<f64>> {
        let n = self.dim();
        Ok(self.spectral(|lam| (-rho * lam).exp()) + DMatrix::identity(n, n) * self.b)
    }

    fn derivative(&self, rho: f64) -> Result<DMatrix<f64>> {
        Ok(self.spectral(|lam| -lam * (-rho * lam).exp()))
    }
}

/// Joint covariance `C_N ⊗ C_M(ρ)` when only the row kernel depends on `ρ`;
/// its derivative is `C_N ⊗ ∂C_M/∂ρ`.
pub struct KroneckerRowFamily<K> {
    pub row: K,
    pub col: DMatrix<f64>,
}

impl<K: ParametricKernel> ParametricKernel for KroneckerRowFamily<K> {
    fn dim(&self) -> usize {
        self.row.dim() * self.col.nrows()
    }

    fn value(&self, rho: f64) -> Result<DMatrix<f64>> {
        Ok(self.col.kronecker(&self.row.value(rho)?))
    }

    fn derivative(&self, rho: f64) -> Result<DMatrix<f64>> {
        Ok(self.col.kronecker(&self.row.derivative(rho)?))
    }
}

fn check_shapes(dim: usize, psi: &DVector<f64>, s: &DMatrix<f64>) -> Result<()> {
    if psi.len() != dim || s.shape() != (dim, dim) {
        return Err(Error::input(format!(
            "kernel has dim {dim} but mean has {} entries and covariance is {}x{}",
            psi.len(),
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// `J(ρ) = ½ log|C(ρ)| + ½ ψᵀ C(ρ)^{-1} ψ + ½ tr(C(ρ)^{-1} S)`.
pub fn hyperparam_objective_terms(
    family: &dyn ParametricKernel,
    rho: f64,
    psi: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<f64> {
    check_shapes(family.dim(), psi, s)?;
    let chol = spd_factor(&family.value(rho)?)?;
    let logdet = chol.ln_determinant();
    let quad = psi.dot(&chol.solve(psi));
    let tr = chol.solve(s).trace();
    Ok(0.5 * (logdet + quad + tr))
}

/// `dJ/dρ = ½ tr(C⁻¹ C') - ½ ψᵀ C⁻¹ C' C⁻¹ ψ - ½ tr(C⁻¹ C' C⁻¹ S)` with `ψ`
/// and `S` held fixed, evaluated through Cholesky solves.
pub fn covariance_hyperparam_gradient(
    family: &dyn ParametricKernel,
    rho: f64,
    psi: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<f64> {
    check_shapes(family.dim(), psi, s)?;
    let dc = family.derivative(rho)?;
    if dc.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let chol = spd_factor(&family.value(rho)?)?;
    let c_inv_dc = chol.solve(&dc);
    let alpha = chol.solve(psi);
    let c_inv_s = chol.solve(s);
    let logdet_term = c_inv_dc.trace();
    let quad_term = alpha.dot(&(&dc * &alpha));
    let trace_term = (&c_inv_dc * &c_inv_s).trace();
    Ok(0.5 * (logdet_term - quad_term - trace_term))
}
