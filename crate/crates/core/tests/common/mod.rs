#![allow(dead_code)]

use conmvgp::kernels::GraphSpec;
use conmvgp::solver::ObservationSet;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

pub fn normal_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Random SPD matrix `A Aᵀ / n + shift I`.
pub fn random_spd(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = normal_matrix(n, n, rng);
    let m = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * shift;
    (&m + m.transpose()) * 0.5
}

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_graph(nodes: usize, extra_edges: usize, weighted: bool, rng: &mut ChaCha8Rng) -> GraphSpec {
    let mut order: Vec<usize> = (0..nodes).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    let weight = |rng: &mut ChaCha8Rng| if weighted { rng.random_range(0.2..2.0) } else { 1.0 };
    for i in 1..nodes {
        let j = rng.random_range(0..i);
        let w = weight(rng);
        edges.push((order[i], order[j], w));
    }
    for _ in 0..extra_edges {
        let i = rng.random_range(0..nodes);
        let j = rng.random_range(0..nodes);
        let w = weight(rng);
        if i != j {
            edges.push((i, j, w));
        }
    }
    GraphSpec::new(nodes, edges).unwrap()
}

/// A random fraction of the cells of an `rows × cols` grid (at least one).
pub fn random_cells(rows: usize, cols: usize, frac: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|m| (0..cols).map(move |n| (m, n))).collect();
    cells.shuffle(rng);
    let keep = ((rows * cols) as f64 * frac).round().max(1.0) as usize;
    cells.truncate(keep);
    cells.sort_unstable();
    cells
}

pub fn observe(
    truth: &DMatrix<f64>,
    cells: &[(usize, usize)],
    noise_sd: f64,
    rng: &mut ChaCha8Rng,
) -> ObservationSet {
    let entries = cells.iter().map(|&(m, n)| (m, n, truth[(m, n)] + noise_sd * normal(rng)));
    ObservationSet::new(truth.nrows(), truth.ncols(), entries.collect::<Vec<_>>()).unwrap()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

/// Unwrap that reports errors through `Display`, keeping large payloads out of panics.
pub trait Must<T> {
    fn must(self) -> T;
}

impl<T> Must<T> for conmvgp::Result<T> {
    #[track_caller]
    fn must(self) -> T {
        self.unwrap_or_else(|e| panic!("{e}"))
    }
}
