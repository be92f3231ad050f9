//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, SVD};

use crate::{Error, Result};

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITERS: usize = 10_000;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_asymmetry(m) <= tol
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major flattening, so that `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn mat_of(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn svd(m: &DMatrix<f64>) -> Result<SVD<f64, Dyn, Dyn>> {
    let mut svd = SVD::try_new(m.clone(), true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::numeric("SVD did not converge"))?;
    svd.sort_by_singular_values();
    Ok(svd)
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = SVD::try_new(m.clone(), false, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::numeric("SVD did not converge"))?;
    Ok(svd.singular_values)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().fold(0.0_f64, |a, &s| a.max(s)))
}

pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    SymmetricEigen::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::numeric("symmetric eigendecomposition did not converge"))
}

/// Cholesky factorization of a symmetric positive definite system.
///
/// The plain factorization is tried first; if it fails, a ridge of
/// `1e-10 · trace / n` is added once before giving up.
pub fn spd_factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(Error::input(format!(
            "expected a square system, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol);
    }
    let n = a.nrows().max(1);
    let jitter = 1e-10 * a.trace().abs() / n as f64;
    let mut shifted = a.clone();
    for i in 0..a.nrows() {
        shifted[(i, i)] += jitter;
    }
    Cholesky::new(shifted).ok_or_else(|| {
        Error::numeric(format!(
            "system of size {} is not positive definite (jitter {jitter:.3e})",
            a.nrows()
        ))
    })
}

/// Singular value thresholding: the proximal operator of `tau ‖·‖_*`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::input(format!("threshold must be nonnegative, got {tau}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("svt input contains non-finite values"));
    }
    if m.nrows() == 0 || m.ncols() == 0 || tau == 0.0 {
        return Ok(m.clone());
    }
    let svd = svd(m)?;
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            break;
        }
        out += (u.column(k) * shrunk) * vt.row(k);
    }
    Ok(out)
}
