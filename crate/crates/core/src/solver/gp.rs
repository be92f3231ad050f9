use nalgebra::{DMatrix, DVector};

use super::ObservationSet;
use crate::kernels::KernelMatrix;
use crate::linalg::{spd_factor, symmetrize};
use crate::{Error, Result};

fn check_support(
    c_row: &KernelMatrix,
    c_col: &KernelMatrix,
    indices: impl IntoIterator<Item = (usize, usize)>,
) -> Result<()> {
    for (m, n) in indices {
        if m >= c_row.dim() || n >= c_col.dim() {
            return Err(Error::input(format!(
                "index ({m}, {n}) outside kernel support {}x{}",
                c_row.dim(),
                c_col.dim()
            )));
        }
    }
    Ok(())
}

fn check_noise(noise_var: f64) -> Result<()> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::input(format!("noise variance must be positive, got {noise_var}")));
    }
    Ok(())
}

/// Prior covariance between two lists of indices under `C_N ⊗ C_M`:
/// `C((m,n),(m',n')) = C_M[m,m'] · C_N[n,n']`.
pub fn observed_covariance(
    c_row: &KernelMatrix,
    c_col: &KernelMatrix,
    left: &[(usize, usize)],
    right: &[(usize, usize)],
) -> DMatrix<f64> {
    DMatrix::from_fn(left.len(), right.len(), |i, j| {
        let (m, n) = left[i];
        let (mp, np) = right[j];
        c_row.get(m, mp) * c_col.get(n, np)
    })
}

/// Exact GP posterior mean `c_{q,L} (C_L + σ² I)^{-1} y` at each query.
///
/// Assembles the `L × L` covariance of the observed entries, so it is only
/// meant for small `L`.
pub fn gp_posterior_mean_exact(
    obs: &ObservationSet,
    c_row: &KernelMatrix,
    c_col: &KernelMatrix,
    noise_var: f64,
    queries: &[(usize, usize)],
) -> Result<Vec<f64>> {
    check_noise(noise_var)?;
    let idx = obs.indices();
    check_support(c_row, c_col, idx.iter().copied().chain(queries.iter().copied()))?;
    if idx.is_empty() {
        return Ok(vec![0.0; queries.len()]);
    }
    let mut system = observed_covariance(c_row, c_col, &idx, &idx);
    for i in 0..idx.len() {
        system[(i, i)] += noise_var;
    }
    let chol = spd_factor(&system)?;
    let alpha = chol.solve(&DVector::from_vec(obs.values()));
    let cross = observed_covariance(c_row, c_col, queries, &idx);
    Ok((cross * alpha).iter().copied().collect())
}

/// Exact GP posterior covariance among the query indices:
/// `C_qq - C_qL (C_L + σ² I)^{-1} C_Lq`.
pub fn gp_posterior_covariance(
    observed: &[(usize, usize)],
    c_row: &KernelMatrix,
    c_col: &KernelMatrix,
    noise_var: f64,
    queries: &[(usize, usize)],
) -> Result<DMatrix<f64>> {
    check_noise(noise_var)?;
    check_support(c_row, c_col, observed.iter().copied().chain(queries.iter().copied()))?;
    let prior = observed_covariance(c_row, c_col, queries, queries);
    if observed.is_empty() {
        return Ok(prior);
    }
    let mut system = observed_covariance(c_row, c_col, observed, observed);
    for i in 0..observed.len() {
        system[(i, i)] += noise_var;
    }
    let chol = spd_factor(&system)?;
    let cross = observed_covariance(c_row, c_col, observed, queries);
    let solved = chol.solve(&cross);
    Ok(symmetrize(&(prior - cross.tr_mul(&solved))))
}
