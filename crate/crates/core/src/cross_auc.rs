//! Cross-domain AUC matrix and its summaries.
//!
//! Cell `(i, j)` is the AUC of fakes from dataset `j` (positives) against reals
//! from dataset `i` (negatives). Rows are real providers, columns fake providers.
//! The diagonal is the ordinary intra-dataset AUC; the off-diagonal cells are the
//! cross-domain values that feed the Avg/Min/Std summary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roc_auc::{class_scores, rank_auc, AucError, AucResult, EvalError, Level};
use crate::score_store::{ScoreStore, StoreError, VideoAggregation};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum CrossAucError {
    #[error("cross pair needs two different datasets, got {0:?} twice")]
    SameDataset(String),
    #[error("cross matrix needs at least 2 datasets, found {0}")]
    TooFewDatasets(usize),
    #[error("no off-diagonal cell is present")]
    NoCrossCells,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Auc(#[from] AucError),
}

impl From<EvalError> for CrossAucError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Store(s) => CrossAucError::Store(s),
            EvalError::Auc(a) => CrossAucError::Auc(a),
        }
    }
}

/// A matrix cell: either a computed AUC or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Cell {
    Present(AucResult),
    Absent { reason: String },
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Present(r) => Some(r.value),
            Cell::Absent { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAucMatrix {
    pub dataset_ids: Vec<String>,
    /// Row-major K×K; `cells[i][j]` = AUC(reals of i, fakes of j).
    pub cells: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAucSummary {
    pub cross_avg: f64,
    pub cross_min: f64,
    pub cross_std: f64,
    /// `None` when no diagonal cell is present.
    pub intra_avg: Option<f64>,
    pub n_pairs: usize,
    pub n_missing_pairs: usize,
}

/// AUC(reals of `real_ds`, fakes of `fake_ds`) for two different datasets.
pub fn pair_auc(
    store: &ScoreStore,
    real_ds: &str,
    fake_ds: &str,
    level: Level,
    rule: VideoAggregation,
) -> Result<AucResult, CrossAucError> {
    if real_ds == fake_ds {
        return Err(CrossAucError::SameDataset(real_ds.to_string()));
    }
    let (reals, _) = class_scores(store, real_ds, level, rule)?;
    let (_, fakes) = class_scores(store, fake_ds, level, rule)?;
    Ok(rank_auc(&fakes, &reals)?)
}

/// Fills all K² cells. Cells whose pair lacks reals or fakes are recorded as absent;
/// any other failure (mixed-label videos, non-finite scores) aborts.
pub fn cross_matrix(
    store: &ScoreStore,
    level: Level,
    rule: VideoAggregation,
) -> Result<CrossAucMatrix, CrossAucError> {
    let ids: Vec<String> = store.dataset_ids().into_iter().map(String::from).collect();
    if ids.len() < 2 {
        return Err(CrossAucError::TooFewDatasets(ids.len()));
    }
    let scores = ids
        .iter()
        .map(|id| class_scores(store, id, level, rule))
        .collect::<Result<Vec<_>, _>>()?;

    let mut cells = Vec::with_capacity(ids.len());
    for (i, (reals, _)) in scores.iter().enumerate() {
        let mut row = Vec::with_capacity(ids.len());
        for (j, (_, fakes)) in scores.iter().enumerate() {
            let cell = match rank_auc(fakes, reals) {
                Ok(r) => Cell::Present(r),
                Err(AucError::EmptyClass(_)) => Cell::Absent {
                    reason: absent_reason(&ids[i], reals.is_empty(), &ids[j], fakes.is_empty()),
                },
                Err(e) => return Err(e.into()),
            };
            row.push(cell);
        }
        cells.push(row);
    }
    Ok(CrossAucMatrix {
        dataset_ids: ids,
        cells,
    })
}

fn absent_reason(real_ds: &str, no_reals: bool, fake_ds: &str, no_fakes: bool) -> String {
    match (no_reals, no_fakes) {
        (true, true) => format!("no reals in {real_ds} and no fakes in {fake_ds}"),
        (true, false) => format!("no reals in {real_ds}"),
        _ => format!("no fakes in {fake_ds}"),
    }
}

impl CrossAucMatrix {
    pub fn k(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> &Cell {
        &self.cells[i][j]
    }

    /// Present off-diagonal values in row-major order.
    pub fn cross_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if i != j {
                    out.extend(c.value());
                }
            }
        }
        out
    }

    pub fn intra_values(&self) -> Vec<f64> {
        (0..self.k()).filter_map(|i| self.cells[i][i].value()).collect()
    }

    /// CSV with a header of dataset ids, one row per real provider and cells at
    /// 6 decimals. Absent cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("real\\fake");
        for id in &self.dataset_ids {
            out.push(',');
            out.push_str(&csv_field(id));
        }
        out.push('\n');
        for (id, row) in self.dataset_ids.iter().zip(&self.cells) {
            out.push_str(&csv_field(id));
            for c in row {
                out.push(',');
                if let Some(v) = c.value() {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Summary statistics over a set of cross values; std divides by the count.
pub fn summarize_values(cross: &[f64], intra: &[f64]) -> Result<CrossAucSummary, CrossAucError> {
    if cross.is_empty() {
        return Err(CrossAucError::NoCrossCells);
    }
    let n = cross.len() as f64;
    // centred on the first value so a constant input reproduces itself exactly
    let pivot = cross[0];
    let avg = pivot + cross.iter().map(|v| v - pivot).sum::<f64>() / n;
    let min = cross.iter().copied().fold(f64::INFINITY, f64::min);
    let var = cross.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / n;
    let intra_avg = if intra.is_empty() {
        None
    } else {
        Some(intra.iter().sum::<f64>() / intra.len() as f64)
    };
    Ok(CrossAucSummary {
        cross_avg: avg,
        cross_min: min,
        cross_std: var.sqrt(),
        intra_avg,
        n_pairs: cross.len(),
        n_missing_pairs: 0,
    })
}

/// Unweighted mean, minimum and population std of the present off-diagonal cells.
pub fn summarize(matrix: &CrossAucMatrix) -> Result<CrossAucSummary, CrossAucError> {
    let cross = matrix.cross_values();
    let k = matrix.k();
    let mut s = summarize_values(&cross, &matrix.intra_values())?;
    s.n_missing_pairs = k * k.saturating_sub(1) - cross.len();
    Ok(s)
}

/// Default acceptance tolerance for comparing against published rounded values.
pub const PUBLISHED_TOLERANCE: f64 = 0.0015;

/// Published per-pair values of one detector plus its claimed summary row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedFixture {
    pub name: String,
    #[serde(default)]
    pub detector: String,
    #[serde(default)]
    pub provenance: String,
    pub datasets: Vec<String>,
    pub pairs: Vec<PublishedPair>,
    pub claimed: ClaimedSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedPair {
    pub real: String,
    pub fake: String,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimedSummary {
    pub avg: f64,
    pub min: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("malformed fixture {name:?}: {reason}")]
    MalformedFixture { name: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldCheck {
    pub field: String,
    pub computed: f64,
    pub claimed: f64,
    pub delta: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub name: String,
    pub tolerance: f64,
    pub fields: Vec<FieldCheck>,
    pub pass: bool,
}

impl PublishedFixture {
    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let f: PublishedFixture =
            serde_json::from_str(text).map_err(|e| FixtureError::MalformedFixture {
                name: "<unparsed>".into(),
                reason: e.to_string(),
            })?;
        f.validate()?;
        Ok(f)
    }

    /// Exactly one value per ordered pair of distinct datasets, all within [0, 1].
    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |reason: String| FixtureError::MalformedFixture {
            name: self.name.clone(),
            reason,
        };
        let k = self.datasets.len();
        if k < 2 {
            return Err(bad(format!("needs at least 2 datasets, got {k}")));
        }
        let expected = k * (k - 1);
        if self.pairs.len() != expected {
            return Err(bad(format!(
                "expected {expected} off-diagonal values, got {}",
                self.pairs.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.pairs {
            if p.real == p.fake {
                return Err(bad(format!("diagonal pair {}/{}", p.real, p.fake)));
            }
            for d in [&p.real, &p.fake] {
                if !self.datasets.contains(d) {
                    return Err(bad(format!("unknown dataset {d:?}")));
                }
            }
            if !(0.0..=1.0).contains(&p.auc) {
                return Err(bad(format!("AUC {} out of range", p.auc)));
            }
            if !seen.insert((p.real.as_str(), p.fake.as_str())) {
                return Err(bad(format!("pair {}/{} listed twice", p.real, p.fake)));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.auc).collect()
    }

    /// Looks up the published value for (real provider, fake provider).
    pub fn value(&self, real: &str, fake: &str) -> Option<f64> {
        self.pairs
            .iter()
            .find(|p| p.real == real && p.fake == fake)
            .map(|p| p.auc)
    }
}

/// Recomputes avg/min/std from the published pairs and compares them to the claims.
pub fn verify_published(
    fixture: &PublishedFixture,
    tolerance: f64,
) -> Result<VerifyReport, FixtureError> {
    fixture.validate()?;
    let s = summarize_values(&fixture.values(), &[]).map_err(|e| {
        FixtureError::MalformedFixture {
            name: fixture.name.clone(),
            reason: e.to_string(),
        }
    })?;
    let fields: Vec<FieldCheck> = [
        ("avg", s.cross_avg, fixture.claimed.avg),
        ("min", s.cross_min, fixture.claimed.min),
        ("std", s.cross_std, fixture.claimed.std),
    ]
    .into_iter()
    .map(|(field, computed, claimed)| {
        let delta = computed - claimed;
        FieldCheck {
            field: field.to_string(),
            computed,
            claimed,
            delta,
            pass: delta.abs() <= tolerance,
        }
    })
    .collect();
    let pass = fields.iter().all(|f| f.pass);
    Ok(VerifyReport {
        name: fixture.name.clone(),
        tolerance,
        fields,
        pass,
    })
}
