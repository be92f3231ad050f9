use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{FitParams, ObservationSet, Problem};
use crate::kernels::BasisFactor;
use crate::linalg::svd;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "conmvgp-model";

/// Per-fit bookkeeping, not part of the serialized model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub solver: String,
    pub iterations: usize,
    pub objective: f64,
    /// Objective after each outer iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Low-rank parameter matrix `B = P Qᵀ` with the hyperparameters it was
/// fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanModel {
    pub row_factor: DMatrix<f64>,
    pub col_factor: DMatrix<f64>,
    pub params: FitParams,
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_basis_id: String,
    pub col_basis_id: String,
    pub seed: u64,
    pub diagnostics: FitDiagnostics,
}

impl MeanModel {
    pub fn rank(&self) -> usize {
        self.row_factor.ncols()
    }

    pub fn row_basis_dim(&self) -> usize {
        self.row_factor.nrows()
    }

    pub fn col_basis_dim(&self) -> usize {
        self.col_factor.nrows()
    }

    /// The dense parameter matrix `P Qᵀ`.
    pub fn parameter_matrix(&self) -> DMatrix<f64> {
        &self.row_factor * self.col_factor.transpose()
    }

    pub fn nuclear_norm(&self) -> Result<f64> {
        Ok(balanced_factors(&self.row_factor, &self.col_factor, 0.0)?.2.iter().sum())
    }

    pub(crate) fn from_factors(
        p: DMatrix<f64>,
        q: DMatrix<f64>,
        problem: &Problem<'_>,
        row_basis: &BasisFactor,
        col_basis: &BasisFactor,
        seed: u64,
        diagnostics: FitDiagnostics,
    ) -> Self {
        Self {
            row_factor: p,
            col_factor: q,
            params: *problem.params(),
            n_rows: problem.observations().n_rows(),
            n_cols: problem.observations().n_cols(),
            row_basis_id: row_basis.id().to_string(),
            col_basis_id: col_basis.id().to_string(),
            seed,
            diagnostics,
        }
    }

    /// Checks that the bases match the ones the model was fitted with.
    pub fn check_bases(&self, row_basis: &BasisFactor, col_basis: &BasisFactor) -> Result<()> {
        if row_basis.id() != self.row_basis_id {
            return Err(Error::input(format!(
                "row basis {} does not match model row basis {}",
                row_basis.id(),
                self.row_basis_id
            )));
        }
        if col_basis.id() != self.col_basis_id {
            return Err(Error::input(format!(
                "column basis {} does not match model column basis {}",
                col_basis.id(),
                self.col_basis_id
            )));
        }
        Ok(())
    }

    /// Header lines followed by `P` and `Q` in row-major order.
    ///
    /// Floats are printed in shortest round-trip form, so reading the text
    /// back restores every value bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {MODEL_FORMAT_VERSION}");
        let _ = writeln!(out, "rows {}", self.n_rows);
        let _ = writeln!(out, "cols {}", self.n_cols);
        let _ = writeln!(out, "row_basis_dim {}", self.row_basis_dim());
        let _ = writeln!(out, "col_basis_dim {}", self.col_basis_dim());
        let _ = writeln!(out, "rank {}", self.rank());
        let _ = writeln!(out, "lambda {:?}", self.params.lambda);
        let _ = writeln!(out, "frobenius_weight {}", u8::from(self.params.frobenius));
        let _ = writeln!(out, "noise_var {:?}", self.params.noise_var);
        let _ = writeln!(out, "row_kernel {}", self.row_basis_id);
        let _ = writeln!(out, "col_kernel {}", self.col_basis_id);
        let _ = writeln!(out, "seed {}", self.seed);
        for (name, m) in [("P", &self.row_factor), ("Q", &self.col_factor)] {
            let _ = writeln!(out, "{name}");
            for row in m.row_iter() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::input(format!("model file truncated before {what}")))
        };
        let magic = next("magic")?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::input("not a model file"))?;
        if version != MODEL_FORMAT_VERSION.to_string() {
            return Err(Error::input(format!("unsupported model format version {version}")));
        }

        fn field<'t>(line: &'t str, key: &str) -> Result<&'t str> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| Error::input(format!("expected `{key}` header, got {line:?}")))
        }
        fn num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| Error::input(format!("bad value for `{key}`: {s:?}")))
        }

        let n_rows: usize = num(field(next("rows")?, "rows")?, "rows")?;
        let n_cols: usize = num(field(next("cols")?, "cols")?, "cols")?;
        let dm: usize = num(field(next("row_basis_dim")?, "row_basis_dim")?, "row_basis_dim")?;
        let dn: usize = num(field(next("col_basis_dim")?, "col_basis_dim")?, "col_basis_dim")?;
        let rank: usize = num(field(next("rank")?, "rank")?, "rank")?;
        let lambda: f64 = num(field(next("lambda")?, "lambda")?, "lambda")?;
        let w: u8 = num(field(next("frobenius_weight")?, "frobenius_weight")?, "frobenius_weight")?;
        let noise_var: f64 = num(field(next("noise_var")?, "noise_var")?, "noise_var")?;
        let row_basis_id = field(next("row_kernel")?, "row_kernel")?.to_string();
        let col_basis_id = field(next("col_kernel")?, "col_kernel")?.to_string();
        let seed: u64 = num(field(next("seed")?, "seed")?, "seed")?;
        if w > 1 {
            return Err(Error::input("frobenius_weight must be 0 or 1"));
        }

        let mut read_block = |name: &str, rows: usize| -> Result<DMatrix<f64>> {
            let header = next(name)?;
            if header.trim() != name {
                return Err(Error::input(format!("expected `{name}` block, got {header:?}")));
            }
            let mut vals = Vec::with_capacity(rows * rank);
            for r in 0..rows {
                let line = next(name)?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::input(format!("bad value in {name} row {r}")))?;
                if row.len() != rank {
                    return Err(Error::input(format!(
                        "{name} row {r} has {} values, expected {rank}",
                        row.len()
                    )));
                }
                vals.extend(row);
            }
            Ok(DMatrix::from_row_slice(rows, rank, &vals))
        };
        let row_factor = read_block("P", dm)?;
        let col_factor = read_block("Q", dn)?;

        Ok(Self {
            row_factor,
            col_factor,
            params: FitParams { lambda, noise_var, frobenius: w == 1 },
            n_rows,
            n_cols,
            row_basis_id,
            col_basis_id,
            seed,
            diagnostics: FitDiagnostics::default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// `ψ(m, n) = G_M(m) P Qᵀ G_N(n)ᵀ` at each index.
pub fn predict_mean(
    model: &MeanModel,
    row_basis: &BasisFactor,
    col_basis: &BasisFactor,
    indices: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if row_basis.basis_dim() != model.row_basis_dim() || col_basis.basis_dim() != model.col_basis_dim() {
        return Err(Error::input(format!(
            "model expects basis dims {}x{}, got {}x{}",
            model.row_basis_dim(),
            model.col_basis_dim(),
            row_basis.basis_dim(),
            col_basis.basis_dim()
        )));
    }
    if let Some(&(m, n)) = indices
        .iter()
        .find(|&&(m, n)| m >= row_basis.rows() || n >= col_basis.rows())
    {
        return Err(Error::input(format!(
            "index ({m}, {n}) outside kernel support {}x{}",
            row_basis.rows(),
            col_basis.rows()
        )));
    }
    if model.rank() == 0 {
        return Ok(vec![0.0; indices.len()]);
    }
    // Project only the rows and columns that are queried.
    let mut row_cache: std::collections::HashMap<usize, nalgebra::DVector<f64>> = Default::default();
    let mut col_cache: std::collections::HashMap<usize, nalgebra::DVector<f64>> = Default::default();
    let mut out = Vec::with_capacity(indices.len());
    for &(m, n) in indices {
        let a = row_cache
            .entry(m)
            .or_insert_with(|| model.row_factor.tr_mul(&row_basis.values().row(m).transpose()));
        let b = col_cache
            .entry(n)
            .or_insert_with(|| model.col_factor.tr_mul(&col_basis.values().row(n).transpose()));
        out.push(a.dot(b));
    }
    Ok(out)
}

/// `1/(2σ²) Σ_L (y - ψ)² + w/2 ‖B‖_F² + λ ‖B‖_*` for `B = P Qᵀ`, with the
/// nuclear norm computed exactly from the singular values of `B`.
pub fn objective(
    model: &MeanModel,
    row_basis: &BasisFactor,
    col_basis: &BasisFactor,
    obs: &ObservationSet,
) -> Result<f64> {
    let problem = Problem::new(obs, row_basis, col_basis, model.params)?;
    if row_basis.basis_dim() != model.row_basis_dim() || col_basis.basis_dim() != model.col_basis_dim() {
        return Err(Error::input("model factors do not match basis dimensions"));
    }
    factor_objective(&problem, &model.row_factor, &model.col_factor)
}

pub(crate) fn factor_objective(problem: &Problem<'_>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let preds = problem.predictions_factors(p, q);
    let params = problem.params();
    let mut value = problem.data_term(&preds);
    if p.ncols() == 0 {
        return Ok(value);
    }
    let (_, _, sv) = balanced_factors(p, q, 0.0)?;
    let w = params.frobenius_weight();
    value += 0.5 * w * sv.iter().map(|s| s * s).sum::<f64>();
    value += params.lambda * sv.iter().sum::<f64>();
    Ok(value)
}

/// Rewrites `P Qᵀ` as `(U √S)(V √S)ᵀ` from its thin SVD, dropping singular
/// values at or below `drop_rel · s_max`. Returns the new factors and the
/// retained singular values in decreasing order.
pub(crate) fn balanced_factors(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    drop_rel: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let (dm, dn) = (p.nrows(), q.nrows());
    if p.ncols() == 0 {
        return Ok((DMatrix::zeros(dm, 0), DMatrix::zeros(dn, 0), Vec::new()));
    }
    let qr_p = p.clone().qr();
    let qr_q = q.clone().qr();
    let (qp, rp) = (qr_p.q(), qr_p.r());
    let (qq, rq) = (qr_q.q(), qr_q.r());
    let core = &rp * rq.transpose();
    let dec = svd(&core)?;
    let (u, vt) = (dec.u.unwrap(), dec.v_t.unwrap());
    let s = dec.singular_values;
    let s_max = s.iter().fold(0.0_f64, |a, &v| a.max(v));
    let keep: Vec<usize> = (0..s.len())
        .filter(|&k| s[k] > drop_rel * s_max && s[k] > 0.0)
        .collect();
    let mut np = DMatrix::zeros(dm, keep.len());
    let mut nq = DMatrix::zeros(dn, keep.len());
    let mut values = Vec::with_capacity(keep.len());
    for (col, &k) in keep.iter().enumerate() {
        let root = s[k].sqrt();
        np.set_column(col, &(&qp * u.column(k) * root));
        nq.set_column(col, &(&qq * vt.row(k).transpose() * root));
        values.push(s[k]);
    }
    Ok((np, nq, values))
}
