//! Prior covariances over rows or columns and their basis factors.
//!
//! Graphs become normalized Laplacians `L = I - D^{-1/2} A D^{-1/2}` and
//! then diffusion kernels `C = exp(-a L) + b I`. A kernel is factored as
//! `C = G Gᵀ` so the mean function can be parameterized by a small matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{max_abs, max_asymmetry, symmetric_eigen, symmetrize};
use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

/// An undirected weighted graph over `node_count` nodes.
///
/// Self-loops are dropped and repeated edges (in either orientation) are
/// merged by summing their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl GraphSpec {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::input("graph must have at least one node"));
        }
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::input(format!(
                    "edge ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::input(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            if i == j {
                continue;
            }
            *merged.entry((i.min(j), i.max(j))).or_insert(0.0) += w;
        }
        Ok(Self {
            node_count,
            edges: merged.into_iter().map(|((i, j), w)| (i, j, w)).collect(),
        })
    }

    /// Unweighted graph from index pairs.
    pub fn unweighted(node_count: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(node_count, pairs.iter().map(|&(i, j)| (i, j, 1.0)))
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Canonical edges `(i, j, w)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.node_count {
            return Err(Error::input("permutation length does not match node count"));
        }
        Self::new(
            self.node_count,
            self.edges.iter().map(|&(i, j, w)| (perm[i], perm[j], w)),
        )
    }
}

/// Parses an edge list: one `i j [weight]` per line, `#` comments ignored.
///
/// The node count is `max(node_count, largest index + 1)`; directed inputs
/// are symmetrized.
pub fn parse_edge_list(text: &str, node_count: Option<usize>) -> Result<GraphSpec> {
    let mut edges = Vec::new();
    let mut max_index = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::input(format!(
                "edge list line {}: expected `i j [weight]`, got {line:?}",
                lineno + 1
            )));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::input(format!("edge list line {}: bad node index {s:?}", lineno + 1))
            })
        };
        let i = parse_idx(fields[0])?;
        let j = parse_idx(fields[1])?;
        let w = match fields.get(2) {
            Some(s) => s.parse::<f64>().map_err(|_| {
                Error::input(format!("edge list line {}: bad weight {s:?}", lineno + 1))
            })?,
            None => 1.0,
        };
        max_index = Some(max_index.unwrap_or(0).max(i).max(j));
        edges.push((i, j, w));
    }
    let inferred = max_index.map_or(0, |m| m + 1);
    let nodes = node_count.unwrap_or(0).max(inferred);
    GraphSpec::new(nodes, edges)
}

pub fn load_edge_list(path: impl AsRef<Path>, node_count: Option<usize>) -> Result<GraphSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text, node_count)
}

/// Symmetric weighted adjacency matrix with zero diagonal.
pub fn build_adjacency(graph: &GraphSpec) -> DMatrix<f64> {
    let n = graph.node_count();
    let mut a = DMatrix::zeros(n, n);
    for &(i, j, w) in graph.edges() {
        a[(i, j)] += w;
        a[(j, i)] += w;
    }
    a
}

/// `L = I - D^{-1/2} A D^{-1/2}`. Isolated nodes get `D^{-1/2} = 0`, so
/// their row of `L` is the identity row.
pub fn normalized_laplacian(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !adjacency.is_square() {
        return Err(Error::input("adjacency matrix must be square"));
    }
    if max_asymmetry(adjacency) > SYMMETRY_TOL {
        return Err(Error::input("adjacency matrix is not symmetric"));
    }
    if adjacency.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::input("adjacency matrix must be finite and nonnegative"));
    }
    let n = adjacency.nrows();
    let inv_sqrt_deg: Vec<f64> = adjacency
        .row_iter()
        .map(|row| {
            let d = row.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut lap = DMatrix::identity(n, n);
    for j in 0..n {
        for i in 0..n {
            let a = adjacency[(i, j)];
            if a != 0.0 {
                lap[(i, j)] -= inv_sqrt_deg[i] * a * inv_sqrt_deg[j];
            }
        }
    }
    Ok(lap)
}

/// A symmetric positive semidefinite covariance over one index set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    label: String,
}

impl KernelMatrix {
    /// Wraps a matrix after checking symmetry and positive semidefiniteness.
    pub fn new(values: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 || !values.is_square() {
            return Err(Error::input("kernel matrix must be square and nonempty"));
        }
        if max_asymmetry(&values) > SYMMETRY_TOL {
            return Err(Error::input("kernel matrix is not symmetric"));
        }
        let min_eig = symmetric_eigen(&values)?.eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(Error::input(format!(
                "kernel matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self { values, label: label.into() })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

pub fn identity_kernel(n: usize) -> Result<KernelMatrix> {
    if n == 0 {
        return Err(Error::input("identity kernel needs n >= 1"));
    }
    Ok(KernelMatrix {
        values: DMatrix::identity(n, n),
        label: format!("identity(n={n})"),
    })
}

/// `C = exp(-a L) + b I` through the symmetric eigendecomposition of `L`.
pub fn diffusion_kernel(laplacian: &DMatrix<f64>, a: f64, b: f64) -> Result<KernelMatrix> {
    if !(a.is_finite() && a >= 0.0) || !(b.is_finite() && b >= 0.0) {
        return Err(Error::input(format!(
            "diffusion parameters must be nonnegative, got a={a}, b={b}"
        )));
    }
    if laplacian.nrows() == 0 || !laplacian.is_square() {
        return Err(Error::input("laplacian must be square and nonempty"));
    }
    if max_asymmetry(laplacian) > SYMMETRY_TOL {
        return Err(Error::input("laplacian is not symmetric"));
    }
    let n = laplacian.nrows();
    let eig = symmetric_eigen(laplacian)?;
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(k).scale_mut((-a * lam).exp());
    }
    let mut c = &scaled * eig.eigenvectors.transpose();
    for i in 0..n {
        c[(i, i)] += b;
    }
    Ok(KernelMatrix {
        values: symmetrize(&c),
        label: format!("diffusion(a={a},b={b},n={n})"),
    })
}

/// Convenience: graph → adjacency → Laplacian → diffusion kernel.
pub fn graph_diffusion_kernel(graph: &GraphSpec, a: f64, b: f64) -> Result<KernelMatrix> {
    let lap = normalized_laplacian(&build_adjacency(graph))?;
    let mut kernel = diffusion_kernel(&lap, a, b)?;
    kernel.label = format!("{}@{}", kernel.label, short_digest(&lap));
    Ok(kernel)
}

/// A factor `G` with `G Gᵀ ≈ C` for a source kernel `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFactor {
    values: DMatrix<f64>,
    id: String,
}

impl BasisFactor {
    /// Wraps an explicit factor. The id is derived from its contents.
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let id = format!("explicit#{}", short_digest(&values));
        Self { values, id }
    }

    pub fn with_id(values: DMatrix<f64>, id: impl Into<String>) -> Self {
        Self { values, id: id.into() }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn basis_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Identifier recorded in fitted models to check basis compatibility.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.values * self.values.transpose()
    }
}

/// Factors `C` as `G Gᵀ`.
///
/// Cholesky of `C + jitter I` is tried first (default jitter
/// `1e-8 · max diag`). If it fails, or a pivot is no larger than the jitter
/// itself (a numerically semidefinite kernel), the factor comes from the
/// eigendecomposition with negative eigenvalues clipped and null directions
/// dropped, so `basis_dim` may be smaller than `dim`.
pub fn factorize_basis(kernel: &KernelMatrix, jitter: Option<f64>) -> Result<BasisFactor> {
    let c = kernel.values();
    if max_asymmetry(c) > SYMMETRY_TOL {
        return Err(Error::input("kernel matrix is not symmetric"));
    }
    let n = c.nrows();
    let max_diag = (0..n).map(|i| c[(i, i)]).fold(0.0_f64, f64::max);
    let jitter = jitter.unwrap_or(1e-8 * max_diag);
    if jitter < 0.0 {
        return Err(Error::input("jitter must be nonnegative"));
    }

    let mut shifted = c.clone();
    for i in 0..n {
        shifted[(i, i)] += jitter;
    }
    let pivot_floor = 100.0 * jitter.max(f64::EPSILON * max_diag);
    if let Some(chol) = nalgebra::Cholesky::new(shifted) {
        let l = chol.l();
        if (0..n).all(|i| l[(i, i)] * l[(i, i)] > pivot_floor) {
            let id = format!("{}#chol:{}", kernel.label(), short_digest(&l));
            return Ok(BasisFactor { values: l, id });
        }
    }

    let eig = symmetric_eigen(c)?;
    let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    let cutoff = max_eig * (n as f64) * f64::EPSILON * 10.0;
    let mut order: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > cutoff).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut g = DMatrix::zeros(n, order.len());
    for (col, &k) in order.iter().enumerate() {
        g.set_column(col, &(eig.eigenvectors.column(k) * eig.eigenvalues[k].sqrt()));
    }
    let id = format!("{}#eig:{}", kernel.label(), short_digest(&g));
    Ok(BasisFactor { values: g, id })
}

/// Relative reconstruction error `‖G Gᵀ - C‖_max / max|C|`.
pub fn reconstruction_error(basis: &BasisFactor, kernel: &KernelMatrix) -> f64 {
    let scale = max_abs(kernel.values()).max(f64::MIN_POSITIVE);
    max_abs(&(basis.reconstruct() - kernel.values())) / scale
}

/// First 16 hex digits of the SHA-256 of the matrix shape and values.
pub fn short_digest(m: &DMatrix<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.nrows() as u64).to_le_bytes());
    hasher.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Plain-text dense matrix: a `# label` line, a `rows cols` line, then
/// one whitespace-separated row per line.
pub fn write_matrix(path: impl AsRef<Path>, label: &str, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "# {label}");
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_matrix`], returning `(label, matrix)`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(String, DMatrix<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut label = String::new();
    let mut lines = text.lines().filter_map(|l| {
        let t = l.trim();
        if let Some(rest) = t.strip_prefix('#') {
            if label.is_empty() {
                label = rest.trim().to_string();
            }
            None
        } else if t.is_empty() {
            None
        } else {
            Some(t)
        }
    });
    let shape = lines.next().ok_or_else(|| Error::input("matrix file has no shape line"))?;
    let dims: Vec<usize> = shape
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::input(format!("bad matrix shape line {shape:?}")))?;
    if dims.len() != 2 {
        return Err(Error::input(format!("bad matrix shape line {shape:?}")));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut values = Vec::with_capacity(rows * cols);
    for (r, line) in lines.by_ref().take(rows).enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::input(format!("bad value in matrix row {r}")))?;
        if row.len() != cols {
            return Err(Error::input(format!("matrix row {r} has {} values, expected {cols}", row.len())));
        }
        values.extend(row);
    }
    if values.len() != rows * cols {
        return Err(Error::input("matrix file is truncated"));
    }
    drop(lines);
    Ok((label, DMatrix::from_row_slice(rows, cols, &values)))
}

/// How a prior covariance is built for one side of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Identity,
    Diffusion,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Identity => "identity",
            KernelKind::Diffusion => "diffusion",
        }
    }
}
