//! Observation files, cross-validation splits and negative sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::solver::ObservationSet;
use crate::{Error, Result};

/// Parses whitespace-separated `m n y` triples.
///
/// Lines starting with `#` are comments, except an optional header
/// `#rows M cols N` that fixes the grid size. Without it the grid is the
/// smallest one that holds every entry. Repeated indices are averaged.
pub fn parse_triples(text: &str) -> Result<ObservationSet> {
    let mut dims: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            if tokens.first() == Some(&"rows") {
                dims = Some(parse_header(&tokens, line_no)?);
            }
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::input(format!("line {line_no}: expected `m n y`, got {line:?}")));
        }
        let m: usize = parse_field(tokens[0], "row index", line_no)?;
        let n: usize = parse_field(tokens[1], "column index", line_no)?;
        let y: f64 = parse_field(tokens[2], "value", line_no)?;
        if !y.is_finite() {
            return Err(Error::input(format!("line {line_no}: value is not finite")));
        }
        if let Some((rows, cols)) = dims {
            if m >= rows || n >= cols {
                return Err(Error::input(format!(
                    "line {line_no}: entry ({m}, {n}) outside declared {rows}x{cols} grid"
                )));
            }
        }
        entries.push((m, n, y));
    }
    let (rows, cols) = dims.unwrap_or_else(|| {
        entries.iter().fold((0, 0), |(r, c), &(m, n, _)| (r.max(m + 1), c.max(n + 1)))
    });
    ObservationSet::new(rows, cols, entries)
}

fn parse_header(tokens: &[&str], line_no: usize) -> Result<(usize, usize)> {
    match tokens {
        ["rows", r, "cols", c] => Ok((
            parse_field(r, "row count", line_no)?,
            parse_field(c, "column count", line_no)?,
        )),
        _ => Err(Error::input(format!("line {line_no}: malformed header, expected `#rows M cols N`"))),
    }
}

fn parse_field<T: std::str::FromStr>(token: &str, what: &str, line_no: usize) -> Result<T> {
    token
        .parse()
        .map_err(|_| Error::input(format!("line {line_no}: invalid {what} {token:?}")))
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text).map_err(|e| match e {
        Error::Input(msg) => Error::input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes triples in the format read by [`parse_triples`], header included.
pub fn format_triples(obs: &ObservationSet) -> String {
    let mut out = format!("#rows {} cols {}\n", obs.n_rows(), obs.n_cols());
    for &(m, n, y) in obs.entries() {
        out.push_str(&format!("{m} {n} {y:?}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Observed entries are held out; every row keeps some training data.
    KnownRows,
    /// Whole rows are held out.
    NewRows,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::KnownRows => "known_rows",
            SplitMode::NewRows => "new_rows",
        }
    }
}

/// A partition of the observed entries into test folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub mode: SplitMode,
    pub seed: u64,
    /// Sorted entry positions per fold.
    pub folds: Vec<Vec<usize>>,
    /// Held-out rows per fold; empty for known-row splits.
    pub held_out_rows: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }

    /// Training and test sets for one fold, both on the full grid.
    pub fn train_test(&self, obs: &ObservationSet, fold: usize) -> Result<(ObservationSet, ObservationSet)> {
        let test = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::input(format!("fold {fold} out of range")))?;
        let mut in_test = vec![false; obs.len()];
        for &p in test {
            if p >= obs.len() {
                return Err(Error::input(format!("split refers to entry {p}, data has {}", obs.len())));
            }
            in_test[p] = true;
        }
        let train: Vec<usize> = (0..obs.len()).filter(|&p| !in_test[p]).collect();
        Ok((obs.subset(&train)?, obs.subset(test)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_folds(count: usize, items: usize, what: &str) -> Result<()> {
    if count < 2 {
        return Err(Error::input(format!("need at least 2 folds, got {count}")));
    }
    if count > items {
        return Err(Error::input(format!("{count} folds but only {items} {what}")));
    }
    Ok(())
}

/// Deals items into `count` folds after a seeded shuffle; sizes differ by at
/// most one.
fn deal(mut items: Vec<usize>, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); count];
    for (i, item) in items.into_iter().enumerate() {
        folds[i % count].push(item);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Splits observed entries uniformly at random.
pub fn split_known_rows(obs: &ObservationSet, count: usize, seed: u64) -> Result<FoldSplit> {
    check_folds(count, obs.len(), "observations")?;
    Ok(FoldSplit {
        mode: SplitMode::KnownRows,
        seed,
        folds: deal((0..obs.len()).collect(), count, seed),
        held_out_rows: Vec::new(),
    })
}

/// Splits observed rows; every entry of a held-out row goes to its fold.
pub fn split_new_rows(obs: &ObservationSet, count: usize, seed: u64) -> Result<FoldSplit> {
    let rows = obs.observed_rows();
    check_folds(count, rows.len(), "observed rows")?;
    let row_folds = deal(rows, count, seed);
    let mut fold_of = vec![usize::MAX; obs.n_rows()];
    for (f, rows) in row_folds.iter().enumerate() {
        for &m in rows {
            fold_of[m] = f;
        }
    }
    let mut folds = vec![Vec::new(); count];
    for (p, &(m, _, _)) in obs.entries().iter().enumerate() {
        folds[fold_of[m]].push(p);
    }
    Ok(FoldSplit { mode: SplitMode::NewRows, seed, folds, held_out_rows: row_folds })
}

pub fn split(obs: &ObservationSet, mode: SplitMode, count: usize, seed: u64) -> Result<FoldSplit> {
    match mode {
        SplitMode::KnownRows => split_known_rows(obs, count, seed),
        SplitMode::NewRows => split_new_rows(obs, count, seed),
    }
}

/// One draw of unobserved cells, sorted by `(m, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub replicate: usize,
    pub cells: Vec<(usize, usize)>,
}

impl NegativeSample {
    /// Positives labeled with their values plus negatives labeled 0.
    pub fn with_positives(&self, positives: &ObservationSet) -> Result<ObservationSet> {
        let entries = positives
            .entries()
            .iter()
            .copied()
            .chain(self.cells.iter().map(|&(m, n)| (m, n, 0.0)));
        ObservationSet::new(positives.n_rows(), positives.n_cols(), entries)
    }
}

/// Draws `reps` independent sets of unobserved cells.
///
/// Globally, each set holds `count` cells chosen uniformly without
/// replacement among the cells not in `positives` (`count` defaults to the
/// number of positives). With `per_row`, row `m` receives about
/// `count · |row m positives| / |positives|` cells from its own unobserved
/// columns instead.
pub fn sample_negatives(
    positives: &ObservationSet,
    count: Option<usize>,
    reps: usize,
    seed: u64,
    per_row: bool,
) -> Result<Vec<NegativeSample>> {
    let (rows, cols) = (positives.n_rows(), positives.n_cols());
    let count = count.unwrap_or(positives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(reps);
    if per_row {
        let quotas = row_quotas(positives, count);
        let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for &(m, n, _) in positives.entries() {
            by_row[m].push(n);
        }
        for replicate in 1..=reps {
            let mut cells = Vec::new();
            for (m, taken) in by_row.iter().enumerate() {
                let free = cols - taken.len();
                let want = quotas[m].min(free);
                for rank in draw_ranks(&mut rng, free, want) {
                    cells.push((m, nth_free(taken, rank)));
                }
            }
            cells.sort_unstable();
            out.push(NegativeSample { replicate, cells });
        }
    } else {
        let total = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::input("grid too large for negative sampling"))?;
        let free = total - positives.len();
        if count > free {
            return Err(Error::input(format!(
                "requested {count} negatives but only {free} unobserved cells exist"
            )));
        }
        let taken: Vec<usize> = positives.entries().iter().map(|&(m, n, _)| m * cols + n).collect();
        for replicate in 1..=reps {
            let mut cells: Vec<(usize, usize)> = draw_ranks(&mut rng, free, count)
                .into_iter()
                .map(|rank| {
                    let id = nth_free(&taken, rank);
                    (id / cols, id % cols)
                })
                .collect();
            cells.sort_unstable();
            out.push(NegativeSample { replicate, cells });
        }
    }
    Ok(out)
}

fn draw_ranks(rng: &mut ChaCha8Rng, free: usize, count: usize) -> Vec<usize> {
    if count == 0 || free == 0 {
        return Vec::new();
    }
    rand::seq::index::sample(rng, free, count.min(free)).into_vec()
}

/// The `rank`-th (0-based) integer not in the sorted list `taken`.
fn nth_free(taken: &[usize], rank: usize) -> usize {
    // Smallest x with x - |{t in taken: t < x}| == rank and x not taken:
    // count of taken values <= candidate grows monotonically, so search on
    // the number of taken values that precede the answer.
    let (mut lo, mut hi) = (0, taken.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        // free integers below taken[mid]
        if taken[mid] - mid <= rank {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    rank + lo
}

fn row_quotas(positives: &ObservationSet, count: usize) -> Vec<usize> {
    let mut per_row = vec![0usize; positives.n_rows()];
    for &(m, _, _) in positives.entries() {
        per_row[m] += 1;
    }
    let total = positives.len().max(1) as f64;
    per_row
        .iter()
        .map(|&p| ((count as f64) * p as f64 / total).round() as usize)
        .collect()
}
