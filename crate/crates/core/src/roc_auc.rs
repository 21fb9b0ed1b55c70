//! Tie-aware rank AUC and ROC curves.
//!
//! Fakes are the positive class. A pair (fake, real) earns 1 when the fake scores
//! strictly higher, 0.5 on a tie and 0 otherwise, so `auc(p, n) + auc(n, p) == 1`.
//!
//! Both [`rank_auc`] and [`auc_bruteforce`] accumulate the doubled Mann-Whitney
//! statistic `2·#{p > n} + #{p == n}` as an integer and divide once, which makes
//! the two routes bit-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score_store::{ScoreStore, StoreError, VideoAggregation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub value: f64,
    pub n_pos: u64,
    pub n_neg: u64,
    pub n_tied_pairs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Positive,
    Negative,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AucError {
    #[error("{0:?} class is empty")]
    EmptyClass(Class),
    #[error("non-finite score in {0:?} class")]
    NonFiniteScore(Class),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Auc(#[from] AucError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Frame,
    Video,
}

fn check(pos: &[f64], neg: &[f64]) -> Result<(), AucError> {
    if pos.is_empty() {
        return Err(AucError::EmptyClass(Class::Positive));
    }
    if neg.is_empty() {
        return Err(AucError::EmptyClass(Class::Negative));
    }
    if pos.iter().any(|s| !s.is_finite()) {
        return Err(AucError::NonFiniteScore(Class::Positive));
    }
    if neg.iter().any(|s| !s.is_finite()) {
        return Err(AucError::NonFiniteScore(Class::Negative));
    }
    Ok(())
}

fn finish(u2: u128, ties: u64, n_pos: u64, n_neg: u64) -> AucResult {
    let denom = 2 * n_pos as u128 * n_neg as u128;
    AucResult {
        value: u2 as f64 / denom as f64,
        n_pos,
        n_neg,
        n_tied_pairs: ties,
    }
}

/// Sorted (score, is_positive) pairs; `-0.0` and `0.0` compare equal.
fn merged_sorted(pos: &[f64], neg: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    all
}

/// Walks tie groups in ascending score order, yielding (positives, negatives) per group.
fn tie_groups(sorted: &[(f64, bool)]) -> impl Iterator<Item = (u64, u64)> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= sorted.len() {
            return None;
        }
        let s = sorted[i].0;
        let (mut p, mut n) = (0u64, 0u64);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        Some((p, n))
    })
}

/// Mann-Whitney AUC by sorting, O((m+n) log(m+n)).
pub fn rank_auc(pos: &[f64], neg: &[f64]) -> Result<AucResult, AucError> {
    check(pos, neg)?;
    let sorted = merged_sorted(pos, neg);
    let mut neg_below = 0u64;
    let mut u2 = 0u128;
    let mut ties = 0u64;
    for (p, n) in tie_groups(&sorted) {
        u2 += p as u128 * (2 * neg_below as u128 + n as u128);
        ties += p * n;
        neg_below += n;
    }
    Ok(finish(u2, ties, pos.len() as u64, neg.len() as u64))
}

/// Explicit double loop over all pairs. Intended as a test oracle for small inputs.
pub fn auc_bruteforce(pos: &[f64], neg: &[f64]) -> Result<AucResult, AucError> {
    check(pos, neg)?;
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    Ok(finish(
        2 * wins as u128 + ties as u128,
        ties,
        pos.len() as u64,
        neg.len() as u64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
            .sum()
    }
}

/// ROC points from sweeping a threshold down over the distinct scores.
/// A tie group moves both rates at once, so its segment is diagonal.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<RocCurve, AucError> {
    check(pos, neg)?;
    let sorted = merged_sorted(pos, neg);
    let groups: Vec<(u64, u64)> = tie_groups(&sorted).collect();
    let (n_pos, n_neg) = (pos.len() as f64, neg.len() as f64);
    let mut points = Vec::with_capacity(groups.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    for &(p, n) in groups.iter().rev() {
        tp += p;
        fp += n;
        points.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    Ok(RocCurve { points })
}

/// (reals, fakes) scores of a dataset at the requested level.
pub fn class_scores(
    store: &ScoreStore,
    dataset_id: &str,
    level: Level,
    rule: VideoAggregation,
) -> Result<(Vec<f64>, Vec<f64>), StoreError> {
    match level {
        Level::Frame => store.partition(dataset_id),
        Level::Video => Ok(store.aggregate_video(dataset_id, rule)?.partition()),
    }
}

/// AUC of a dataset's own fakes against its own reals.
pub fn intra_auc(
    store: &ScoreStore,
    dataset_id: &str,
    level: Level,
    rule: VideoAggregation,
) -> Result<AucResult, EvalError> {
    let (reals, fakes) = class_scores(store, dataset_id, level, rule)?;
    Ok(rank_auc(&fakes, &reals)?)
}
