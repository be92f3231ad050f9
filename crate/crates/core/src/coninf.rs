//! Dense Gaussian projections for small grids.
//!
//! The constrained posterior over `vec(Z)` for an `M × N` grid splits into a
//! covariance part, solved in closed form, and a mean part, a quadratic with
//! a nuclear-norm penalty. Everything here holds `MN × MN` matrices, so it
//! is limited to [`MAX_DENSE_DIM`] and serves as a cross-check of the
//! scalable solver.
//!
//! Vectors are column-major flattenings: entry `(m, n)` sits at `m + n·M`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{mat_of, max_asymmetry, nuclear_norm, spd_factor, symmetrize, vec_of};
use crate::solver::ProxOutcome;
use crate::{Error, Result};

pub const MAX_DENSE_DIM: usize = 2500;

/// A multivariate normal `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::input(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if max_asymmetry(&cov) > 1e-10 {
            return Err(Error::input("covariance is not symmetric"));
        }
        spd_factor(&cov).map_err(|_| Error::input("covariance is not positive definite"))?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Observed positions within a flattened grid of size `dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMap {
    dim: usize,
    indices: Vec<usize>,
}

impl SelectionMap {
    pub fn new(dim: usize, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in &indices {
            if i >= dim {
                return Err(Error::input(format!("selected index {i} outside dimension {dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::input(format!("selected index {i} repeated")));
            }
        }
        Ok(Self { dim, indices })
    }

    /// Selection of grid cells `(m, n)` on an `rows × cols` grid.
    pub fn from_grid(rows: usize, cols: usize, cells: &[(usize, usize)]) -> Result<Self> {
        let mut flat = Vec::with_capacity(cells.len());
        for &(m, n) in cells {
            if m >= rows || n >= cols {
                return Err(Error::input(format!("cell ({m}, {n}) outside {rows}x{cols} grid")));
            }
            flat.push(m + n * rows);
        }
        Self::new(rows * cols, flat)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// The explicit `L × dim` 0/1 matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.indices.len(), self.dim);
        for (row, &i) in self.indices.iter().enumerate() {
            p[(row, i)] = 1.0;
        }
        p
    }
}

/// `KL(q ‖ p)` between two Gaussians.
pub fn gaussian_kl(q: &GaussianBelief, p: &GaussianBelief) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::input("beliefs have different dimensions"));
    }
    let chol_p = spd_factor(&p.cov).map_err(|e| Error::numeric(format!("prior covariance: {e}")))?;
    let chol_q = spd_factor(&q.cov)?;
    let diff = &p.mean - &q.mean;
    let trace = chol_p.solve(&q.cov).trace();
    let quad = diff.dot(&chol_p.solve(&diff));
    let kl = 0.5 * (trace + quad - q.dim() as f64 + chol_p.ln_determinant() - chol_q.ln_determinant());
    Ok(kl.max(0.0))
}

/// Penalized projection objective
/// `2 KL(q ‖ posterior) + 2λ ‖mat(E_q[Z])‖_*`, whose minimizer over
/// Gaussians is [`project_mean_nuclear`].
pub fn projection_objective(
    q: &GaussianBelief,
    posterior: &GaussianBelief,
    rows: usize,
    cols: usize,
    lambda: f64,
) -> Result<f64> {
    check_grid(posterior.dim(), rows, cols)?;
    let nuc = nuclear_norm(&mat_of(q.mean(), rows, cols))?;
    Ok(2.0 * gaussian_kl(q, posterior)? + 2.0 * lambda * nuc)
}

fn check_grid(dim: usize, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != dim {
        return Err(Error::input(format!("{rows}x{cols} grid does not match dimension {dim}")));
    }
    if dim > MAX_DENSE_DIM {
        return Err(Error::input(format!(
            "dense projection limited to {MAX_DENSE_DIM} cells, got {dim}"
        )));
    }
    Ok(())
}

/// Projects the posterior `N(φ, Σ)` over an `rows × cols` grid onto
/// Gaussians with a nuclear-norm penalty on the mean.
///
/// The covariance of the result is `Σ` itself. The mean solves
/// `min_ψ (φ - ψ)ᵀ Σ⁻¹ (φ - ψ) + 2λ ‖mat(ψ)‖_*` by accelerated proximal
/// gradient started at `φ`.
pub fn project_mean_nuclear(
    posterior: &GaussianBelief,
    rows: usize,
    cols: usize,
    lambda: f64,
) -> Result<GaussianBelief> {
    check_grid(posterior.dim(), rows, cols)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::input(format!("lambda must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(posterior.clone());
    }
    let chol = spd_factor(posterior.cov())
        .map_err(|_| Error::input("posterior covariance is not positive definite"))?;
    let phi = mat_of(posterior.mean(), rows, cols);
    let min_diag = posterior.cov().diagonal().min();
    let outcome: ProxOutcome = crate::solver::accelerated_prox_dense(
        |psi| {
            let diff = vec_of(&(psi - &phi));
            let solved = chol.solve(&diff);
            Ok((0.5 * diff.dot(&solved), mat_of(&solved, rows, cols)))
        },
        lambda,
        phi.clone(),
        1.0 / min_diag.max(f64::MIN_POSITIVE),
        1e-13,
        50_000,
    )?;
    if !outcome.converged {
        return Err(Error::Convergence {
            iterations: outcome.iterations,
            objective: outcome.objective,
            last: None,
        });
    }
    Ok(GaussianBelief { mean: vec_of(&outcome.x), cov: posterior.cov().clone() })
}

/// Post-data covariance in prior form,
/// `S* = C - C Pᵀ (P C Pᵀ + σ² I)^{-1} P C`.
pub fn postdata_covariance(prior: &DMatrix<f64>, noise_var: f64, sel: &SelectionMap) -> Result<DMatrix<f64>> {
    check_prior(prior, noise_var, sel)?;
    if sel.indices().is_empty() {
        return Ok(prior.clone());
    }
    let idx = sel.indices();
    let cross = prior.select_rows(idx.iter()); // P C, L × d
    let mut inner = cross.select_columns(idx.iter()); // P C Pᵀ
    for i in 0..idx.len() {
        inner[(i, i)] += noise_var;
    }
    let chol = spd_factor(&inner)?;
    let solved = chol.solve(&cross);
    Ok(symmetrize(&(prior - cross.tr_mul(&solved))))
}

/// Post-data covariance in information form, `(C⁻¹ + σ⁻² PᵀP)^{-1}`.
pub fn postdata_covariance_information_form(
    prior: &DMatrix<f64>,
    noise_var: f64,
    sel: &SelectionMap,
) -> Result<DMatrix<f64>> {
    check_prior(prior, noise_var, sel)?;
    let d = prior.nrows();
    let mut precision = spd_factor(prior)?.solve(&DMatrix::identity(d, d));
    for &i in sel.indices() {
        precision[(i, i)] += 1.0 / noise_var;
    }
    let precision = symmetrize(&precision);
    let out = spd_factor(&precision)?.solve(&DMatrix::identity(d, d));
    Ok(symmetrize(&out))
}

fn check_prior(prior: &DMatrix<f64>, noise_var: f64, sel: &SelectionMap) -> Result<()> {
    if !prior.is_square() || prior.nrows() != sel.dim() {
        return Err(Error::input("prior covariance does not match selection dimension"));
    }
    if prior.nrows() > MAX_DENSE_DIM {
        return Err(Error::input(format!("dense covariance limited to {MAX_DENSE_DIM} cells")));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::input("noise variance must be positive"));
    }
    Ok(())
}
