use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_triples, SplitMode};
use crate::kernels::{
    factorize_basis, graph_diffusion_kernel, identity_kernel, load_edge_list, BasisFactor, GraphSpec,
    KernelKind,
};
use crate::metrics::Metric;
use crate::solver::{FitOptions, FitParams, ObservationSet, SolverMethod};
use crate::{Error, Result};

/// The three model variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Nuclear norm plus Frobenius penalty.
    #[default]
    ConMvgp,
    /// Nuclear norm only.
    TraceGp,
    /// Frobenius penalty only; λ is fixed at 0.
    Mvgp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::ConMvgp => "con_mvgp",
            ModelKind::TraceGp => "trace_gp",
            ModelKind::Mvgp => "mvgp",
        }
    }

    pub fn frobenius(&self) -> bool {
        !matches!(self, ModelKind::TraceGp)
    }

    pub fn params(&self, lambda: f64, noise_var: f64) -> Result<FitParams> {
        FitParams::new(lambda, noise_var, self.frobenius())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionParams {
    pub a: f64,
    pub b: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeConfig {
    pub enabled: bool,
    /// Negatives per replicate; defaults to the number of training positives.
    pub count: Option<usize>,
    pub reps: usize,
    pub per_row: bool,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self { enabled: false, count: None, reps: 5, per_row: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub options: FitOptions,
}

/// `n` points spaced evenly in log10 between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 5)
}

pub fn default_sigma2_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 20)
}

/// A cross-validation experiment, read from a single JSON document.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub triples: PathBuf,
    pub row_graph: Option<PathBuf>,
    pub col_graph: Option<PathBuf>,
    pub model: ModelKind,
    pub row_kernel: KernelKind,
    pub col_kernel: KernelKind,
    pub diffusion: DiffusionParams,
    pub lambda_grid: Vec<f64>,
    pub sigma2_grid: Vec<f64>,
    pub split_mode: SplitMode,
    pub folds: usize,
    pub negatives: NegativeConfig,
    /// An entry is relevant for ranking when its value exceeds this.
    pub relevance_threshold: f64,
    pub metrics: Vec<Metric>,
    /// Ranking metrics are computed for `k = 1..=k_max`.
    pub k_max: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            triples: PathBuf::new(),
            row_graph: None,
            col_graph: None,
            model: ModelKind::ConMvgp,
            row_kernel: KernelKind::Diffusion,
            col_kernel: KernelKind::Diffusion,
            diffusion: DiffusionParams::default(),
            lambda_grid: default_lambda_grid(),
            sigma2_grid: default_sigma2_grid(),
            split_mode: SplitMode::KnownRows,
            folds: 5,
            negatives: NegativeConfig::default(),
            relevance_threshold: 0.0,
            metrics: vec![Metric::Precision, Metric::Recall, Metric::Rmse],
            k_max: 20,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.triples);
        self.row_graph.as_mut().map(fix);
        self.col_graph.as_mut().map(fix);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// λ values actually fitted: `[0]` for MV-GP, the grid otherwise.
    pub fn effective_lambda_grid(&self) -> Vec<f64> {
        match self.model {
            ModelKind::Mvgp => vec![0.0],
            _ => self.lambda_grid.clone(),
        }
    }

    pub fn kernel_label(&self) -> String {
        format!("{}/{}", self.row_kernel.as_str(), self.col_kernel.as_str())
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() && self.model != ModelKind::Mvgp {
            return Err(Error::input("lambda grid is empty"));
        }
        if self.sigma2_grid.is_empty() {
            return Err(Error::input("sigma2 grid is empty"));
        }
        for &lambda in &self.effective_lambda_grid() {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::input(format!("lambda grid value {lambda} is not a nonnegative number")));
            }
            if self.model == ModelKind::TraceGp && lambda == 0.0 {
                return Err(Error::input("trace_gp needs every lambda > 0"));
            }
        }
        for &s in &self.sigma2_grid {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::input(format!("sigma2 grid value {s} is not positive")));
            }
        }
        if self.split_mode == SplitMode::NewRows && self.row_kernel == KernelKind::Identity {
            return Err(Error::input(
                "new_rows prediction needs a graph row kernel; the identity kernel carries no information to unseen rows",
            ));
        }
        if !(self.diffusion.a >= 0.0 && self.diffusion.b >= 0.0) {
            return Err(Error::input("diffusion parameters must be nonnegative"));
        }
        if self.folds < 2 {
            return Err(Error::input("need at least 2 folds"));
        }
        if self.metrics.is_empty() {
            return Err(Error::input("metric list is empty"));
        }
        if self.k_max == 0 && self.metrics.iter().any(Metric::is_ranking) {
            return Err(Error::input("k_max must be positive for ranking metrics"));
        }
        if self.negatives.enabled && self.negatives.reps == 0 {
            return Err(Error::input("negative sampling needs reps >= 1"));
        }
        if !self.relevance_threshold.is_finite() {
            return Err(Error::input("relevance threshold must be finite"));
        }
        self.solver.options.validate()
    }

    /// Checks that every file the config needs is named.
    pub fn validate_paths(&self) -> Result<()> {
        if self.triples.as_os_str().is_empty() {
            return Err(Error::input("config has no triples path"));
        }
        if self.row_kernel == KernelKind::Diffusion && self.row_graph.is_none() {
            return Err(Error::input("diffusion row kernel needs row_graph"));
        }
        if self.col_kernel == KernelKind::Diffusion && self.col_graph.is_none() {
            return Err(Error::input("diffusion column kernel needs col_graph"));
        }
        Ok(())
    }

    /// Reads the triples and graphs named in the config and builds bases.
    pub fn load_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        self.validate_paths()?;
        let obs = load_triples(&self.triples)?;
        let row_graph = self.row_graph.as_ref().map(|p| load_edge_list(p, None)).transpose()?;
        let col_graph = self.col_graph.as_ref().map(|p| load_edge_list(p, None)).transpose()?;
        Dataset::build(obs, row_graph.as_ref(), col_graph.as_ref(), self)
    }
}

/// Observations on the full grid together with the bases for both sides.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub obs: ObservationSet,
    pub row_basis: BasisFactor,
    pub col_basis: BasisFactor,
}

impl Dataset {
    /// The grid is widened to cover every graph node, so rows and columns
    /// that only appear in a graph can still be predicted.
    pub fn build(
        obs: ObservationSet,
        row_graph: Option<&GraphSpec>,
        col_graph: Option<&GraphSpec>,
        config: &ExperimentConfig,
    ) -> Result<Self> {
        let rows = obs.n_rows().max(row_graph.map_or(0, GraphSpec::node_count));
        let cols = obs.n_cols().max(col_graph.map_or(0, GraphSpec::node_count));
        let obs = if (rows, cols) == (obs.n_rows(), obs.n_cols()) { obs } else { obs.with_grid(rows, cols)? };
        let row_basis = side_basis(config.row_kernel, row_graph, rows, config.diffusion, "row")?;
        let col_basis = side_basis(config.col_kernel, col_graph, cols, config.diffusion, "column")?;
        Ok(Self { obs, row_basis, col_basis })
    }
}

fn side_basis(
    kind: KernelKind,
    graph: Option<&GraphSpec>,
    size: usize,
    diffusion: DiffusionParams,
    side: &str,
) -> Result<BasisFactor> {
    if size == 0 {
        return Err(Error::input(format!("{side} side has no entries")));
    }
    let kernel = match kind {
        KernelKind::Identity => identity_kernel(size)?,
        KernelKind::Diffusion => {
            let graph = graph.ok_or_else(|| Error::input(format!("diffusion {side} kernel needs a graph")))?;
            let graph = if graph.node_count() < size {
                GraphSpec::new(size, graph.edges().iter().copied())?
            } else {
                graph.clone()
            };
            graph_diffusion_kernel(&graph, diffusion.a, diffusion.b)?
        }
    };
    factorize_basis(&kernel, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let l = default_lambda_grid();
        let expected = [1e-3, 3.162e-2, 1.0, 3.162e1, 1e3];
        assert_eq!(l.len(), 5);
        for (a, b) in l.iter().zip(expected) {
            assert!((a / b - 1.0).abs() < 1e-3, "{a} vs {b}");
        }
        let s = default_sigma2_grid();
        assert_eq!(s.len(), 20);
        assert!((s[0] - 1e-3).abs() < 1e-15 && (s[19] - 1e3).abs() < 1e-9);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_identity_rows_for_new_rows() {
        let cfg = ExperimentConfig {
            row_kernel: KernelKind::Identity,
            col_kernel: KernelKind::Identity,
            split_mode: SplitMode::NewRows,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn model_specific_checks() {
        let base = ExperimentConfig {
            row_kernel: KernelKind::Identity,
            col_kernel: KernelKind::Identity,
            ..Default::default()
        };
        assert!(base.validate().is_ok());
        let trace = ExperimentConfig { model: ModelKind::TraceGp, lambda_grid: vec![0.0, 1.0], ..base.clone() };
        assert!(trace.validate().is_err());
        let mvgp = ExperimentConfig { model: ModelKind::Mvgp, lambda_grid: vec![], ..base.clone() };
        assert!(mvgp.validate().is_ok());
        assert_eq!(mvgp.effective_lambda_grid(), vec![0.0]);
        let no_graph = ExperimentConfig { row_kernel: KernelKind::Diffusion, triples: "t".into(), ..base };
        assert!(no_graph.validate().is_ok());
        assert!(no_graph.validate_paths().is_err());
    }

    #[test]
    fn json_defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(r#"{"triples": "t.txt", "model": "mvgp", "folds": 3}"#).unwrap();
        assert_eq!(cfg.folds, 3);
        assert_eq!(cfg.model, ModelKind::Mvgp);
        assert_eq!(cfg.negatives.reps, 5);
        assert_eq!(cfg.diffusion, DiffusionParams { a: 1.0, b: 1.0 });
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_json(r#"{"model": "nope"}"#).is_err());
    }
}
