//! Published per-pair Cross-AUC tables shipped with the crate, and a synthesizer
//! that turns such a table into a score file whose pair AUCs reproduce it exactly.

use thiserror::Error;

use crate::cross_auc::PublishedFixture;
use crate::score_store::{Label, Sample};

const PUBLISHED: &[(&str, &str)] = &[
    ("xception", include_str!("../fixtures/published/xception.json")),
    ("efficientnet_b4", include_str!("../fixtures/published/efficientnet_b4.json")),
    ("f3net", include_str!("../fixtures/published/f3net.json")),
    ("ffd", include_str!("../fixtures/published/ffd.json")),
    ("recce", include_str!("../fixtures/published/recce.json")),
    ("ucf", include_str!("../fixtures/published/ucf.json")),
    ("clip", include_str!("../fixtures/published/clip.json")),
    ("forensics_adapter", include_str!("../fixtures/published/forensics_adapter.json")),
    ("effort", include_str!("../fixtures/published/effort.json")),
    ("ours", include_str!("../fixtures/published/ours.json")),
];

pub fn published_names() -> Vec<&'static str> {
    PUBLISHED.iter().map(|(n, _)| *n).collect()
}

pub fn published_fixture(name: &str) -> Option<PublishedFixture> {
    PUBLISHED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| PublishedFixture::from_json(text).expect("shipped fixture is valid"))
}

pub fn all_published() -> Vec<PublishedFixture> {
    published_names()
        .into_iter()
        .map(|n| published_fixture(n).expect("listed"))
        .collect()
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SynthesisError {
    #[error("value {value} for {real}/{fake} is not a multiple of 1/{denominator}")]
    OffGrid {
        real: String,
        fake: String,
        value: f64,
        denominator: u32,
    },
    #[error("table is not realizable as a dominance chain of real providers")]
    NotAChain,
    #[error("too many datasets ({0}) for exhaustive chain search")]
    TooManyDatasets(usize),
    #[error("need at least one real per dataset")]
    NoReals,
}

/// Builds a score set whose pair AUCs equal the fixture's values exactly.
///
/// Every dataset gets `denominator` fakes and `reals_per_dataset` reals. All reals
/// of one dataset sit in a single gap of the fake sequence, so AUC(reals of i,
/// fakes of j) is the count of j-fakes above that gap over `denominator`. This
/// works when the rows can be ordered so that each row dominates the next on every
/// column except its own diagonal, which is then chosen between its neighbours.
pub fn synthesize_scores(
    fixture: &PublishedFixture,
    denominator: u32,
    reals_per_dataset: usize,
) -> Result<Vec<Sample>, SynthesisError> {
    if reals_per_dataset == 0 {
        return Err(SynthesisError::NoReals);
    }
    let k = fixture.datasets.len();
    if k > 8 {
        return Err(SynthesisError::TooManyDatasets(k));
    }
    let n = denominator as i64;
    let mut target = vec![vec![0i64; k]; k];
    for p in &fixture.pairs {
        let i = index_of(&fixture.datasets, &p.real);
        let j = index_of(&fixture.datasets, &p.fake);
        let scaled = p.auc * denominator as f64;
        let count = scaled.round();
        if (scaled - count).abs() > 1e-6 {
            return Err(SynthesisError::OffGrid {
                real: p.real.clone(),
                fake: p.fake.clone(),
                value: p.auc,
                denominator,
            });
        }
        target[i][j] = count as i64;
    }

    let order = find_chain(&target).ok_or(SynthesisError::NotAChain)?;

    // Counts of each dataset's fakes lying above the gap holding row order[p].
    let points: Vec<Vec<i64>> = order
        .iter()
        .enumerate()
        .map(|(p, &row)| {
            let mut pt = target[row].clone();
            let upper = if p == 0 { n } else { target[order[p - 1]][row] };
            let lower = if p + 1 == k { 0 } else { target[order[p + 1]][row] };
            pt[row] = (upper + lower) / 2;
            pt
        })
        .collect();

    // Tokens in ascending score order.
    enum Token {
        Fake(usize),
        Real(usize),
    }
    let mut tokens = Vec::new();
    let mut current = vec![n; k];
    let emit_fakes = |current: &mut Vec<i64>, goal: &[i64], tokens: &mut Vec<Token>| {
        // round-robin so fakes of different datasets interleave
        while current.iter().zip(goal).any(|(c, g)| c > g) {
            for j in 0..k {
                if current[j] > goal[j] {
                    tokens.push(Token::Fake(j));
                    current[j] -= 1;
                }
            }
        }
    };
    for (p, &row) in order.iter().enumerate() {
        emit_fakes(&mut current, &points[p], &mut tokens);
        tokens.extend((0..reals_per_dataset).map(|_| Token::Real(row)));
    }
    emit_fakes(&mut current, &vec![0; k], &mut tokens);

    let total = tokens.len() as f64;
    let mut per_ds: Vec<Vec<Sample>> = vec![Vec::new(); k];
    let mut counters = vec![(0usize, 0usize); k];
    for (pos, tok) in tokens.iter().enumerate() {
        let score = (pos + 1) as f64 / (total + 1.0);
        let (ds, label) = match *tok {
            Token::Fake(j) => (j, Label::Fake),
            Token::Real(i) => (i, Label::Real),
        };
        let c = &mut counters[ds];
        let idx = match label {
            Label::Real => {
                c.0 += 1;
                c.0
            }
            Label::Fake => {
                c.1 += 1;
                c.1
            }
        };
        let id = format!("{}-{}-{idx:05}", fixture.datasets[ds], label);
        per_ds[ds].push(Sample {
            sample_id: id.clone(),
            dataset_id: fixture.datasets[ds].clone(),
            video_id: id,
            frame_idx: 0,
            label,
            score,
        });
    }
    Ok(per_ds.into_iter().flatten().collect())
}

fn index_of(ids: &[String], id: &str) -> usize {
    ids.iter().position(|d| d == id).expect("validated fixture")
}

fn find_chain(target: &[Vec<i64>]) -> Option<Vec<usize>> {
    let k = target.len();
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        if is_chain(target, &perm) {
            return Some(perm);
        }
        if !next_permutation(&mut perm) {
            return None;
        }
    }
}

fn is_chain(t: &[Vec<i64>], order: &[usize]) -> bool {
    let k = order.len();
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (0..k).any(|j| j != a && j != b && t[a][j] < t[b][j]) {
            return false;
        }
    }
    // a row's own column must fit between its neighbours' values there
    (1..k.saturating_sub(1)).all(|p| {
        let row = order[p];
        t[order[p - 1]][row] >= t[order[p + 1]][row]
    })
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
