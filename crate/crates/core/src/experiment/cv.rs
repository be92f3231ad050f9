use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Dataset, ExperimentConfig};
use crate::data::{sample_negatives, split, FoldSplit};
use crate::metrics::{aggregate_rows, precision_at_k, recall_at_k, rmse, Metric, RankedRow, Summary};
use crate::solver::{fit_mean, MeanModel, ObservationSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// The solver hit its iteration cap; the last iterate was scored.
    NotConverged,
    Failed,
}

/// Scores of one `(fold, λ, σ²)` grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub fold: usize,
    pub lambda: f64,
    pub sigma2: f64,
    pub status: CellStatus,
    pub error: Option<String>,
    /// Objective and rank per negative-sampling replicate.
    pub objectives: Vec<f64>,
    pub ranks: Vec<usize>,
    /// Keyed by [`metric_key`].
    pub values: BTreeMap<String, Summary>,
    pub seconds: f64,
}

/// Best grid point for one metric (and one `k` for ranking metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub metric: Metric,
    pub k: Option<usize>,
    pub lambda: f64,
    pub sigma2: f64,
    /// Mean and population std across folds of the per-fold means.
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub kernel: String,
    pub split_mode: String,
    pub seed: u64,
    pub folds: usize,
    pub records: Vec<CellRecord>,
    pub selections: Vec<Selection>,
    pub total_seconds: f64,
}

pub fn metric_key(metric: Metric, k: Option<usize>) -> String {
    match k {
        Some(k) => format!("{}@{k}", metric.as_str()),
        None => metric.as_str().to_string(),
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct FoldData {
    train: ObservationSet,
    test: ObservationSet,
    /// Training sets, one per negative-sampling replicate.
    replicates: Vec<ObservationSet>,
}

/// Runs the full grid from the files named in `config`.
pub fn run_cv(config: &ExperimentConfig) -> Result<MetricsReport> {
    let data = config.load_dataset()?;
    run_cv_on(config, &data)
}

/// Runs the full grid on data already in memory.
///
/// Every `(fold, λ, σ²)` cell is fitted once per negative-sampling
/// replicate; predictions are averaged over replicates before scoring.
/// Solver failures are recorded in the cell and do not stop the run.
pub fn run_cv_on(config: &ExperimentConfig, data: &Dataset) -> Result<MetricsReport> {
    config.validate()?;
    let start = Instant::now();
    let splits = split(&data.obs, config.split_mode, config.folds, config.seed)?;
    let folds = prepare_folds(config, data, &splits)?;

    let lambdas = config.effective_lambda_grid();
    let mut cells = Vec::new();
    for fold in 0..folds.len() {
        for &lambda in &lambdas {
            for &sigma2 in &config.sigma2_grid {
                cells.push((fold, lambda, sigma2));
            }
        }
    }
    let records: Vec<CellRecord> = cells
        .par_iter()
        .map(|&(fold, lambda, sigma2)| run_cell(config, data, &folds[fold], fold, lambda, sigma2))
        .collect();

    let selections = select(config, &records, folds.len());
    Ok(MetricsReport {
        model: config.model.as_str().to_string(),
        kernel: config.kernel_label(),
        split_mode: config.split_mode.as_str().to_string(),
        seed: config.seed,
        folds: folds.len(),
        records,
        selections,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

fn prepare_folds(config: &ExperimentConfig, data: &Dataset, splits: &FoldSplit) -> Result<Vec<FoldData>> {
    (0..splits.fold_count())
        .map(|fold| {
            let (train, test) = splits.train_test(&data.obs, fold)?;
            let replicates = if config.negatives.enabled {
                let neg = &config.negatives;
                sample_negatives(&train, neg.count, neg.reps, fold_seed(config.seed, fold), neg.per_row)?
                    .iter()
                    .map(|s| s.with_positives(&train))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![train.clone()]
            };
            Ok(FoldData { train, test, replicates })
        })
        .collect()
}

fn run_cell(
    config: &ExperimentConfig,
    data: &Dataset,
    fold_data: &FoldData,
    fold: usize,
    lambda: f64,
    sigma2: f64,
) -> CellRecord {
    let started = Instant::now();
    let mut record = CellRecord {
        fold,
        lambda,
        sigma2,
        status: CellStatus::Ok,
        error: None,
        objectives: Vec::new(),
        ranks: Vec::new(),
        values: BTreeMap::new(),
        seconds: 0.0,
    };
    let outcome = (|| -> Result<()> {
        let params = config.model.params(lambda, sigma2)?;
        let mut models = Vec::with_capacity(fold_data.replicates.len());
        for train in &fold_data.replicates {
            let model = match fit_mean(
                config.solver.method,
                train,
                &data.row_basis,
                &data.col_basis,
                params,
                &config.solver.options,
            ) {
                Ok(m) => m,
                Err(Error::Convergence { last: Some(m), .. }) => {
                    record.status = CellStatus::NotConverged;
                    *m
                }
                Err(e) => return Err(e),
            };
            record.objectives.push(model.diagnostics.objective);
            record.ranks.push(model.rank());
            models.push(model);
        }
        record.values = evaluate(config, data, fold_data, &models)?;
        Ok(())
    })();
    if let Err(e) = outcome {
        record.status = CellStatus::Failed;
        record.error = Some(e.to_string());
        record.values.clear();
    }
    record.seconds = started.elapsed().as_secs_f64();
    record
}

/// Averaged predicted scores for the given rows over all columns.
fn score_rows(data: &Dataset, models: &[MeanModel], rows: &[usize]) -> DMatrix<f64> {
    let n = data.col_basis.rows();
    let mut scores = DMatrix::zeros(rows.len(), n);
    let gm = data.row_basis.values().select_rows(rows.iter());
    for model in models {
        if model.rank() == 0 {
            continue;
        }
        let a = &gm * &model.row_factor;
        let b = data.col_basis.values() * &model.col_factor;
        scores += a * b.transpose();
    }
    scores / models.len().max(1) as f64
}

fn evaluate(
    config: &ExperimentConfig,
    data: &Dataset,
    fold_data: &FoldData,
    models: &[MeanModel],
) -> Result<BTreeMap<String, Summary>> {
    let test_rows = fold_data.test.observed_rows();
    let scores = score_rows(data, models, &test_rows);
    let pos: BTreeMap<usize, usize> = test_rows.iter().enumerate().map(|(i, &m)| (m, i)).collect();
    let mut out = BTreeMap::new();

    if config.metrics.contains(&Metric::Rmse) {
        let (pred, actual): (Vec<f64>, Vec<f64>) = fold_data
            .test
            .entries()
            .iter()
            .map(|&(m, n, y)| (scores[(pos[&m], n)], y))
            .unzip();
        let value = rmse(&pred, &actual)?;
        out.insert(metric_key(Metric::Rmse, None), Summary { mean: value, std: 0.0, count: pred.len() });
    }

    let ranking: Vec<Metric> = config.metrics.iter().copied().filter(Metric::is_ranking).collect();
    if ranking.is_empty() {
        return Ok(out);
    }
    let mut seen: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(m, n, _) in fold_data.train.entries() {
        seen.entry(m).or_default().insert(n);
    }
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(m, n, y) in fold_data.test.entries() {
        if y > config.relevance_threshold {
            relevant.entry(m).or_default().insert(n);
        }
    }
    let empty = BTreeSet::new();
    let mut rows = Vec::new();
    for (i, &m) in test_rows.iter().enumerate() {
        let rel = relevant.get(&m).unwrap_or(&empty);
        if rel.is_empty() {
            continue;
        }
        let skip = seen.get(&m).unwrap_or(&empty);
        let candidates = (0..scores.ncols())
            .filter(|n| !skip.contains(n))
            .map(|n| (n, scores[(i, n)], rel.contains(&n)))
            .collect();
        rows.push(RankedRow::new(m, candidates)?);
    }
    if rows.is_empty() {
        return Ok(out);
    }
    for metric in ranking {
        for k in 1..=config.k_max {
            let values: Vec<f64> = match metric {
                Metric::Precision => rows.iter().map(|r| precision_at_k(r, k)).collect::<Result<_>>()?,
                Metric::Recall => rows
                    .iter()
                    .map(|r| recall_at_k(r, k))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect(),
                Metric::Rmse => unreachable!(),
            };
            out.insert(metric_key(metric, Some(k)), aggregate_rows(&values)?);
        }
    }
    Ok(out)
}

/// Picks, independently for each metric and `k`, the grid point with the
/// best mean over folds. Grid points missing a value in any fold are not
/// eligible; ties keep the earlier grid point.
fn select(config: &ExperimentConfig, records: &[CellRecord], folds: usize) -> Vec<Selection> {
    let mut grid: Vec<(f64, f64)> = Vec::new();
    for r in records {
        if !grid.iter().any(|&(l, s)| l == r.lambda && s == r.sigma2) {
            grid.push((r.lambda, r.sigma2));
        }
    }
    let mut out = Vec::new();
    for &metric in &config.metrics {
        let ks: Vec<Option<usize>> =
            if metric.is_ranking() { (1..=config.k_max).map(Some).collect() } else { vec![None] };
        for k in ks {
            let key = metric_key(metric, k);
            let mut best: Option<Selection> = None;
            for &(lambda, sigma2) in &grid {
                let per_fold: Option<Vec<Summary>> = (0..folds)
                    .map(|f| {
                        records
                            .iter()
                            .find(|r| r.fold == f && r.lambda == lambda && r.sigma2 == sigma2)
                            .and_then(|r| r.values.get(&key).copied())
                    })
                    .collect();
                let Some(per_fold) = per_fold else { continue };
                let means: Vec<f64> = per_fold.iter().map(|s| s.mean).collect();
                let Ok(agg) = aggregate_rows(&means) else { continue };
                if !agg.mean.is_finite() {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some(b) if metric.lower_is_better() => agg.mean < b.mean,
                    Some(b) => agg.mean > b.mean,
                };
                if better {
                    best = Some(Selection { metric, k, lambda, sigma2, mean: agg.mean, std: agg.std, per_fold });
                }
            }
            out.extend(best);
        }
    }
    out
}

impl MetricsReport {
    /// Selected results as CSV: one line per fold plus an `all` line with
    /// the mean and std across folds. Contains no timing, so identical
    /// runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,kernel,split_mode,fold,metric,k,mean,std\n");
        for sel in &self.selections {
            let k = sel.k.map(|k| k.to_string()).unwrap_or_default();
            let prefix = format!("{},{},{}", self.model, self.kernel, self.split_mode);
            for (fold, s) in sel.per_fold.iter().enumerate() {
                out.push_str(&format!("{prefix},{fold},{},{k},{},{}\n", sel.metric.as_str(), s.mean, s.std));
            }
            out.push_str(&format!("{prefix},all,{},{k},{},{}\n", sel.metric.as_str(), sel.mean, sel.std));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn selection(&self, metric: Metric, k: Option<usize>) -> Option<&Selection> {
        self.selections.iter().find(|s| s.metric == metric && s.k == k)
    }

    /// Human-readable table of the selections.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "model {}  kernel {}  split {}  folds {}  seed {}\n",
            self.model, self.kernel, self.split_mode, self.folds, self.seed
        );
        out.push_str(&format!("{:<14} {:>12} {:>12} {:>10} {:>10}\n", "metric", "lambda", "sigma2", "mean", "std"));
        for s in &self.selections {
            out.push_str(&format!(
                "{:<14} {:>12.4e} {:>12.4e} {:>10.4} {:>10.4}\n",
                metric_key(s.metric, s.k),
                s.lambda,
                s.sigma2,
                s.mean,
                s.std
            ));
        }
        let failed = self.records.iter().filter(|r| r.status == CellStatus::Failed).count();
        let capped = self.records.iter().filter(|r| r.status == CellStatus::NotConverged).count();
        out.push_str(&format!(
            "{} cells, {failed} failed, {capped} hit the iteration cap, {:.2}s\n",
            self.records.len(),
            self.total_seconds
        ));
        out
    }
}
