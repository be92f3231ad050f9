use nalgebra::DMatrix;

use super::model::{balanced_factors, FitDiagnostics, MeanModel};
use super::{FitOptions, FitParams, ObservationSet, Problem};
use crate::kernels::BasisFactor;
use crate::linalg::svd;
use crate::{Error, Result};

/// Result of [`accelerated_prox`].
#[derive(Debug, Clone)]
pub struct ProxOutcome {
    pub x: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub converged: bool,
}

/// `svt` that also returns the nuclear norm of its output.
fn shrink(m: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    if tau == 0.0 {
        return Ok((m.clone(), f64::NAN));
    }
    let dec = svd(m)?;
    let (u, vt) = (dec.u.unwrap(), dec.v_t.unwrap());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut nuc = 0.0;
    for (k, &s) in dec.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            break;
        }
        nuc += shrunk;
        out += (u.column(k) * shrunk) * vt.row(k);
    }
    Ok((out, nuc))
}

/// Minimizes `f(X) + λ ‖X‖_*` for smooth `f` given as a value-and-gradient
/// closure.
///
/// Monotone FISTA with backtracking on the Lipschitz estimate and a restart
/// of the momentum whenever a step would increase the objective. Plain
/// proximal steps are accepted within rounding of the current objective, so
/// the iterates keep contracting once objective differences are no longer
/// resolvable. Stops when both the relative change of the objective and the
/// gradient mapping norm fall below `rel_tol`.
pub(crate) fn accelerated_prox<F>(
    value_grad: F,
    lambda: f64,
    x0: DMatrix<f64>,
    lipschitz_start: f64,
    rel_tol: f64,
    max_iters: usize,
) -> Result<ProxOutcome>
where
    F: Fn(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    let nuclear = |x: &DMatrix<f64>| -> Result<f64> {
        if lambda == 0.0 {
            Ok(0.0)
        } else {
            crate::linalg::nuclear_norm(x)
        }
    };

    let (f0, g0) = value_grad(&x0)?;
    let grad_scale = 1.0 + g0.norm();
    let mut x = x0.clone();
    let mut obj_x = f0 + lambda * nuclear(&x)?;
    let mut y = x0;
    let mut y_is_x = true;
    let mut fy_gy = Some((f0, g0));
    let mut t = 1.0_f64;
    let mut lip = lipschitz_start.max(f64::MIN_POSITIVE);
    let mut history = vec![obj_x];
    let gm_tol = rel_tol.max(1e-14) * grad_scale;
    let mut rejected = 0usize;

    for iter in 1..=max_iters {
        let (fy, gy) = match fy_gy.take() {
            Some(v) => v,
            None => value_grad(&y)?,
        };
        // Backtracking on the quadratic upper model.
        let (z, fz, nuc_z) = loop {
            let step = 1.0 / lip;
            let (z, nuc) = shrink(&(&y - &gy * step), lambda * step)?;
            let (fz, _) = value_grad(&z)?;
            let diff = &z - &y;
            let model = fy + gy.dot(&diff) + 0.5 * lip * diff.norm_squared();
            if fz <= model + 1e-15 * (fz.abs() + fy.abs()) || lip > 1e300 {
                let nuc = if lambda == 0.0 { 0.0 } else { nuc };
                break (z, fz, nuc);
            }
            lip *= 2.0;
        };
        let gm_norm = lip * (&z - &y).norm();
        let obj_z = fz + lambda * nuc_z;

        let band = 64.0 * f64::EPSILON * obj_x.abs().max(1.0);
        let obj_old = obj_x;
        let improved = obj_z <= obj_x;
        if improved || (y_is_x && obj_z <= obj_x + band) {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = if improved { (t - 1.0) / t_next } else { 0.0 };
            let x_prev = std::mem::replace(&mut x, z);
            obj_x = obj_z;
            y = &x + (&x - &x_prev) * beta;
            y_is_x = beta == 0.0;
            t = if improved { t_next } else { 1.0 };
            rejected = 0;
        } else {
            // Restart from the last accepted point.
            if y_is_x {
                lip *= 2.0;
                rejected += 1;
            }
            y = x.clone();
            y_is_x = true;
            t = 1.0;
        }
        history.push(obj_x);

        let rel_change = (obj_old - obj_x).abs() / obj_x.abs().max(f64::MIN_POSITIVE);
        // Plain steps failing repeatedly means no representable decrease is left.
        if (rel_change <= rel_tol && gm_norm <= gm_tol) || rejected >= STALL_LIMIT {
            return Ok(ProxOutcome {
                x,
                objective: obj_x,
                iterations: iter,
                history,
                converged: true,
            });
        }
        if improved {
            lip *= 0.95;
        }
    }
    Ok(ProxOutcome {
        objective: obj_x,
        iterations: max_iters,
        x,
        history,
        converged: false,
    })
}

const STALL_LIMIT: usize = 60;

/// Exact solver for
/// `min_B 1/(2σ²) Σ_L (y - G_M B G_Nᵀ)² + w/2 ‖B‖_F² + λ ‖B‖_*`
/// holding `B` densely, started from `B = 0`.
pub fn fit_exact_prox(
    obs: &ObservationSet,
    row_basis: &BasisFactor,
    col_basis: &BasisFactor,
    params: FitParams,
    options: &FitOptions,
) -> Result<MeanModel> {
    let init = DMatrix::zeros(row_basis.basis_dim(), col_basis.basis_dim());
    fit_exact_prox_from(obs, row_basis, col_basis, params, options, init)
}

/// [`fit_exact_prox`] from a given starting matrix.
pub fn fit_exact_prox_from(
    obs: &ObservationSet,
    row_basis: &BasisFactor,
    col_basis: &BasisFactor,
    params: FitParams,
    options: &FitOptions,
    init: DMatrix<f64>,
) -> Result<MeanModel> {
    options.validate()?;
    super::require_observations(obs)?;
    let problem = Problem::new(obs, row_basis, col_basis, params)?;
    if init.shape() != (problem.row_dim(), problem.col_dim()) {
        return Err(Error::input("initial matrix does not match basis dimensions"));
    }
    let lip = problem.lipschitz_bound()?;
    let outcome = accelerated_prox(
        |b| problem.smooth_value_grad(b),
        params.lambda,
        init,
        0.25 * lip,
        options.objective_rel_tol,
        options.max_outer_iters,
    )?;

    let zero = DMatrix::zeros(problem.row_dim(), 0);
    let (p, q) = if outcome.x.iter().all(|&v| v == 0.0) {
        (zero, DMatrix::zeros(problem.col_dim(), 0))
    } else {
        let cols = DMatrix::identity(problem.col_dim(), problem.col_dim());
        let (p, q, _) = balanced_factors(&outcome.x, &cols, 1e-13)?;
        (p, q)
    };
    let diagnostics = FitDiagnostics {
        solver: "exact_prox".into(),
        iterations: outcome.iterations,
        objective: outcome.objective,
        history: outcome.history,
        converged: outcome.converged,
    };
    let model = MeanModel::from_factors(p, q, &problem, row_basis, col_basis, options.seed, diagnostics);
    if !outcome.converged {
        return Err(Error::Convergence {
            iterations: outcome.iterations,
            objective: outcome.objective,
            last: Some(Box::new(model)),
        });
    }
    Ok(model)
}
