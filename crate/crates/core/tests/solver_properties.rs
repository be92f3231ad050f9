mod common;

use common::*;
use conmvgp::kernels::{factorize_basis, BasisFactor, KernelMatrix};
use conmvgp::linalg::{kron, mat_of, spectral_norm, vec_of};
use conmvgp::solver::{
    fit_exact_prox, fit_exact_prox_from, fit_factored, objective, predict_mean, FitOptions, FitParams, MeanModel,
    ObservationSet, Problem,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Instance {
    obs: ObservationSet,
    rows: BasisFactor,
    cols: BasisFactor,
}

fn instance(r: &mut ChaCha8Rng, max_side: usize) -> Instance {
    let (m, n) = (r.random_range(2..=max_side), r.random_range(2..=max_side));
    let (dm, dn) = (r.random_range(1..=m), r.random_range(1..=n));
    let rows = BasisFactor::from_matrix(normal_matrix(m, dm, r) / (dm as f64).sqrt());
    let cols = BasisFactor::from_matrix(normal_matrix(n, dn, r) / (dn as f64).sqrt());
    let truth = normal_matrix(m, 2, r) * normal_matrix(2, n, r);
    let cells = random_cells(m, n, 0.4, r);
    let obs = observe(&truth, &cells, 0.2, r);
    Instance { obs, rows, cols }
}

fn tight() -> FitOptions {
    FitOptions { objective_rel_tol: 1e-12, max_outer_iters: 200_000, ..FitOptions::default() }
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 32, ..ProptestConfig::default() }
}

fn nonincreasing(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn kronecker_vec_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (m, n) = (r.random_range(1..8), r.random_range(1..8));
        let (dm, dn) = (r.random_range(1..6), r.random_range(1..6));
        let gm = normal_matrix(m, dm, &mut r);
        let gn = normal_matrix(n, dn, &mut r);
        let b = normal_matrix(dm, dn, &mut r);
        let direct = vec_of(&(&gm * &b * gn.transpose()));
        let via_kron = kron(&gn, &gm) * vec_of(&b);
        prop_assert!((direct - &via_kron).amax() <= 1e-10);
        prop_assert_eq!(mat_of(&vec_of(&b), dm, dn), b);
    }

    #[test]
    fn dense_and_factored_predictions_agree(seed in any::<u64>()) {
        let mut r = rng(seed);
        let inst = instance(&mut r, 10);
        let params = FitParams::new(0.1, 0.5, true).must();
        let problem = Problem::new(&inst.obs, &inst.rows, &inst.cols, params).must();
        let (dm, dn) = (inst.rows.basis_dim(), inst.cols.basis_dim());
        let p = normal_matrix(dm, 2, &mut r);
        let q = normal_matrix(dn, 2, &mut r);
        let dense = problem.predictions_dense(&(&p * q.transpose()));
        let factored = problem.predictions_factors(&p, &q);
        for (a, b) in dense.iter().zip(&factored) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn exact_solution_is_unique(seed in any::<u64>(), lambda in prop_oneof![Just(0.0), 0.01f64..1.0]) {
        let mut r = rng(seed);
        let inst = instance(&mut r, 12);
        let params = FitParams::new(lambda, 0.5, true).must();
        let (dm, dn) = (inst.rows.basis_dim(), inst.cols.basis_dim());
        let a = fit_exact_prox_from(&inst.obs, &inst.rows, &inst.cols, params, &tight(), normal_matrix(dm, dn, &mut r) * 3.0).must();
        let b = fit_exact_prox_from(&inst.obs, &inst.rows, &inst.cols, params, &tight(), normal_matrix(dm, dn, &mut r) * 3.0).must();
        let gap = max_abs_diff(&a.parameter_matrix(), &b.parameter_matrix());
        prop_assert!(gap <= 1e-5, "max |ΔB| = {gap}");
    }

    #[test]
    fn objective_histories_never_increase(seed in any::<u64>(), lambda in prop_oneof![Just(0.0), 0.01f64..2.0]) {
        let mut r = rng(seed);
        let inst = instance(&mut r, 15);
        let params = FitParams::new(lambda, r.random_range(0.1..2.0), true).must();
        let exact = fit_exact_prox(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
        prop_assert!(nonincreasing(&exact.diagnostics.history), "exact {:?}", exact.diagnostics.history);
        let fact = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
        prop_assert!(nonincreasing(&fact.diagnostics.history), "factored {:?}", fact.diagnostics.history);
    }

    #[test]
    fn zero_solution_above_threshold(seed in any::<u64>(), factor in 1.0f64..3.0, frobenius in any::<bool>()) {
        let mut r = rng(seed);
        let inst = instance(&mut r, 10);
        let base = FitParams::new(1.0, 0.7, frobenius).must();
        let problem = Problem::new(&inst.obs, &inst.rows, &inst.cols, base).must();
        let threshold = spectral_norm(&problem.zero_gradient_matrix()).must();
        let params = FitParams::new(threshold * factor * (1.0 + 1e-6), 0.7, frobenius).must();
        let exact = fit_exact_prox(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
        let fact = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
        prop_assert_eq!(exact.rank(), 0);
        prop_assert_eq!(fact.rank(), 0);
    }

    #[test]
    fn trace_and_constrained_objectives_differ_by_frobenius_term(seed in any::<u64>()) {
        let mut r = rng(seed);
        let inst = instance(&mut r, 10);
        let params = FitParams::new(0.2, 0.5, true).must();
        let model = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
        let mut trace = model.clone();
        trace.params = FitParams::new(0.2, 0.5, false).must();
        let with = objective(&model, &inst.rows, &inst.cols, &inst.obs).must();
        let without = objective(&trace, &inst.rows, &inst.cols, &inst.obs).must();
        let half_fro = 0.5 * model.parameter_matrix().norm_squared();
        prop_assert!((with - without - half_fro).abs() <= 1e-10 * with.abs().max(1.0));
    }

    #[test]
    fn appended_unobserved_nodes_change_nothing(seed in any::<u64>(), extra_rows in 1usize..4, extra_cols in 1usize..4) {
        let mut r = rng(seed);
        let (m, n) = (r.random_range(2..8), r.random_range(2..8));
        let km = random_spd(m + extra_rows, 0.5, &mut r);
        let kn = random_spd(n + extra_cols, 0.5, &mut r);
        let truth = normal_matrix(m, n, &mut r);
        let cells = random_cells(m, n, 0.5, &mut r);
        let small_obs = observe(&truth, &cells, 0.1, &mut r);
        let big_obs = small_obs.with_grid(m + extra_rows, n + extra_cols).must();

        let basis = |k: DMatrix<f64>| factorize_basis(&KernelMatrix::new(k, "k").must(), Some(1e-10)).must();
        let small = (basis(km.view((0, 0), (m, m)).into_owned()), basis(kn.view((0, 0), (n, n)).into_owned()));
        let big = (basis(km), basis(kn));

        let params = FitParams::new(0.05, 0.3, true).must();
        let fit_small = fit_exact_prox(&small_obs, &small.0, &small.1, params, &tight()).must();
        let fit_big = fit_exact_prox(&big_obs, &big.0, &big.1, params, &tight()).must();

        let grid: Vec<(usize, usize)> = (0..m).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        let ps = predict_mean(&fit_small, &small.0, &small.1, &grid).must();
        let pb = predict_mean(&fit_big, &big.0, &big.1, &grid).must();
        let worst = ps.iter().zip(&pb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-10, "prediction drift {worst}");

        let b_big = fit_big.parameter_matrix();
        let b_small = fit_small.parameter_matrix();
        let leading = b_big.view((0, 0), (m, n)).into_owned();
        prop_assert!(max_abs_diff(&leading, &b_small) <= 1e-10);
        let rest = b_big
            .iter()
            .enumerate()
            .filter(|(k, _)| k % b_big.nrows() >= m || k / b_big.nrows() >= n)
            .fold(0.0_f64, |acc, (_, v)| acc.max(v.abs()));
        prop_assert!(rest <= 1e-10, "mass outside the original block {rest}");
    }
}

#[test]
fn model_text_round_trip() {
    let mut r = rng(11);
    let inst = instance(&mut r, 12);
    let params = FitParams::new(0.05, 0.4, true).must();
    let model = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
    let mut back = MeanModel::from_text(&model.to_text()).must();
    back.diagnostics = model.diagnostics.clone();
    assert_eq!(back, model);
}

#[test]
fn rank_zero_model_predicts_zero() {
    let mut r = rng(12);
    let inst = instance(&mut r, 8);
    let params = FitParams::new(1e6, 1.0, true).must();
    let model = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
    assert_eq!(model.rank(), 0);
    let preds = predict_mean(&model, &inst.rows, &inst.cols, &[(0, 0), (1, 1)]).must();
    assert_eq!(preds, vec![0.0, 0.0]);
}

#[test]
fn out_of_support_index_is_named() {
    let mut r = rng(13);
    let inst = instance(&mut r, 6);
    let params = FitParams::new(0.1, 1.0, true).must();
    let model = fit_factored(&inst.obs, &inst.rows, &inst.cols, params, &FitOptions::default()).must();
    let m = inst.rows.rows();
    let err = predict_mean(&model, &inst.rows, &inst.cols, &[(m, 0)]).unwrap_err();
    assert!(err.to_string().contains(&format!("({m}, 0)")), "{err}");
}
