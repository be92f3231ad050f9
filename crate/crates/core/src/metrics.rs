//! Ranking and regression metrics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Candidate columns of one row, sorted for ranking.
///
/// Candidates are ordered by score descending, ties by ascending column id.
/// Callers are expected to have removed columns observed in training.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRow {
    row: usize,
    /// `(column, score, relevant)` in rank order.
    ranked: Vec<(usize, f64, bool)>,
    relevant: usize,
}

impl RankedRow {
    pub fn new(row: usize, candidates: Vec<(usize, f64, bool)>) -> Result<Self> {
        if let Some(&(n, s, _)) = candidates.iter().find(|c| c.1.is_nan()) {
            return Err(Error::input(format!("row {row}: score {s} for column {n} is NaN")));
        }
        let mut ids: Vec<usize> = candidates.iter().map(|c| c.0).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::input(format!("row {row}: column {} listed twice", w[0])));
        }
        let mut ranked = candidates;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let relevant = ranked.iter().filter(|c| c.2).count();
        Ok(Self { row, ranked, relevant })
    }

    pub fn row(&self) -> usize {
        self.row
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    /// `G_m`, the number of relevant candidates.
    pub fn relevant_count(&self) -> usize {
        self.relevant
    }

    pub fn ranked(&self) -> &[(usize, f64, bool)] {
        &self.ranked
    }

    /// Relevant candidates among the top `k`.
    pub fn hits_at(&self, k: usize) -> usize {
        self.ranked.iter().take(k).filter(|c| c.2).count()
    }
}

/// Hits in the top `k` divided by `k`, also when fewer than `k` candidates
/// exist.
pub fn precision_at_k(row: &RankedRow, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::input("precision@k needs k >= 1"));
    }
    Ok(row.hits_at(k) as f64 / k as f64)
}

/// Hits in the top `k` divided by `G_m`; `None` for rows without relevant
/// candidates, which are left out of aggregates.
pub fn recall_at_k(row: &RankedRow, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::input("recall@k needs k >= 1"));
    }
    if row.relevant == 0 {
        return Ok(None);
    }
    Ok(Some(row.hits_at(k) as f64 / row.relevant as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

pub fn aggregate_rows(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::input("cannot aggregate an empty set of values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Summary { mean, std: var.sqrt(), count: values.len() })
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::input(format!(
            "rmse got {} predictions for {} targets",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("rmse of an empty set"));
    }
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `rating > threshold`, strictly.
pub fn relevance_from_ratings(ratings: &[f64], threshold: f64) -> Vec<bool> {
    ratings.iter().map(|&r| r > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    Rmse,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Rmse => "rmse",
        }
    }

    pub fn lower_is_better(&self) -> bool {
        matches!(self, Metric::Rmse)
    }

    pub fn is_ranking(&self) -> bool {
        !matches!(self, Metric::Rmse)
    }
}
