//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when `‖g‖_∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when an iteration lowers `f` by less than `f_rel_tol · max(|f|, 1)`.
    /// Zero disables the test.
    pub f_rel_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iters: 500, memory: 10, grad_tol: 1e-10, f_rel_tol: 1e-15 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. The closure returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);

    for iter in 0..opts.max_iters {
        if g.amax() <= opts.grad_tol {
            return LbfgsOutcome { x, value: fx, iterations: iter, converged: true };
        }

        // Two-loop recursion.
        let mut d = -g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&d);
            d.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            d *= s.dot(y) / y.norm_squared();
        } else {
            d *= 1.0 / g.norm().max(1.0);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&d);
            d.axpy(a - b, s, 1.0);
        }
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            pairs.clear();
            d = -g.clone() / g.norm().max(1.0);
            slope = g.dot(&d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let x_new = &x + &d * step;
            let (f_new, g_new) = f(&x_new);
            if !f_new.is_finite() {
                step *= 0.5;
                continue;
            }
            // Armijo, or approximate Wolfe once `f` differences reach rounding level.
            let armijo = f_new <= fx + 1e-4 * step * slope;
            let new_slope = g_new.dot(&d);
            let approx = f_new <= fx + 1e-14 * fx.abs() && new_slope >= 0.9 * slope && new_slope <= -0.9998 * slope;
            if armijo || approx {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No decrease along a descent direction: at numerical precision.
            return LbfgsOutcome { x, value: fx, iterations: iter, converged: true };
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if opts.f_rel_tol > 0.0 && decrease <= opts.f_rel_tol * fx.abs().max(1.0) {
            return LbfgsOutcome { x, value: fx, iterations: iter + 1, converged: true };
        }
    }
    LbfgsOutcome { x, value: fx, iterations: opts.max_iters, converged: false }
}
