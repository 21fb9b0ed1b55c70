//! Synthetic detector scores with controllable per-domain shifts.
//!
//! Each domain draws Gaussian class-conditional scores. Domains that are perfectly
//! separable on their own can still be badly mis-ranked against each other once
//! their score ranges are translated, which is what the Cross-AUC matrix exposes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::score_store::{Label, Sample, ScoreStore, StoreError};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("invalid histogram range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dataset_id: String,
    pub real_mean: f64,
    pub real_std: f64,
    pub fake_mean: f64,
    pub fake_std: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(format!("{}: {m}", self.dataset_id)));
        if self.dataset_id.is_empty() {
            return Err(SimError::InvalidSpec("empty dataset_id".into()));
        }
        if !(self.real_mean.is_finite() && self.fake_mean.is_finite()) {
            return bad("means must be finite");
        }
        if !(self.real_std.is_finite() && self.real_std > 0.0)
            || !(self.fake_std.is_finite() && self.fake_std > 0.0)
        {
            return bad("standard deviations must be finite and > 0");
        }
        if self.n_real == 0 || self.n_fake == 0 {
            return bad("class counts must be > 0");
        }
        Ok(())
    }

    /// Closed-form AUC of two Gaussian classes: Φ((μf − μr) / √(σr² + σf²)).
    pub fn planted_auc(&self) -> f64 {
        let z = (self.fake_mean - self.real_mean)
            / (self.real_std * self.real_std + self.fake_std * self.fake_std).sqrt();
        0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
    }
}

/// Per-domain seed derived from the base seed and the dataset id, so a domain's
/// draws do not depend on which other domains are generated or in what order.
pub fn domain_seed(base_seed: u64, dataset_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(dataset_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Reals first, then fakes; one frame per sample.
pub fn gen_domain(spec: &DomainSpec) -> Result<Vec<Sample>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(spec.seed, &spec.dataset_id));
    let real = Normal::new(spec.real_mean, spec.real_std)
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let fake = Normal::new(spec.fake_mean, spec.fake_std)
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.n_real + spec.n_fake);
    let classes = [(Label::Real, spec.n_real, real, 'r'), (Label::Fake, spec.n_fake, fake, 'f')];
    for (label, n, dist, tag) in classes {
        for i in 0..n {
            let id = format!("{}-{tag}{i:06}", spec.dataset_id);
            out.push(Sample {
                sample_id: id.clone(),
                dataset_id: spec.dataset_id.clone(),
                video_id: id,
                frame_idx: 0,
                label,
                score: dist.sample(&mut rng),
            });
        }
    }
    Ok(out)
}

/// Id of the k-th derived domain of a scenario.
pub fn shifted_id(base: &str, k: usize) -> String {
    format!("{base}_s{k}")
}

/// One derived domain per shift. Every domain reuses the base draws translated by
/// its shift, so all intra AUCs are identical and only the cross cells move.
pub fn make_shift_scenario(base: &DomainSpec, shifts: &[f64]) -> Result<ScoreStore, SimError> {
    Ok(ScoreStore::from_samples(shift_scenario_samples(base, shifts)?)?)
}

pub fn shift_scenario_samples(base: &DomainSpec, shifts: &[f64]) -> Result<Vec<Sample>, SimError> {
    if shifts.is_empty() {
        return Err(SimError::InvalidSpec("at least one shift is required".into()));
    }
    if let Some(s) = shifts.iter().find(|s| !s.is_finite()) {
        return Err(SimError::InvalidSpec(format!("non-finite shift {s}")));
    }
    let draws = gen_domain(base)?;
    let mut out = Vec::with_capacity(draws.len() * shifts.len());
    for (k, &shift) in shifts.iter().enumerate() {
        let id = shifted_id(&base.dataset_id, k);
        for s in &draws {
            let suffix = &s.sample_id[base.dataset_id.len()..];
            let sample_id = format!("{id}{suffix}");
            out.push(Sample {
                sample_id: sample_id.clone(),
                dataset_id: id.clone(),
                video_id: sample_id,
                frame_idx: 0,
                label: s.label,
                score: s.score + shift,
            });
        }
    }
    Ok(out)
}

/// Uniform-bin counts; values outside `[lo, hi)` land in the end bins.
pub fn histogram(scores: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<u64>, SimError> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(SimError::InvalidRange("bins must be >= 1".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(SimError::InvalidRange(format!("need lo < hi, got ({lo}, {hi})")));
    }
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &s in scores {
        let b = ((s - lo) / width).floor();
        let idx = if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub dataset_id: String,
    pub bin_edges: Vec<f64>,
    pub counts_real: Vec<u64>,
    pub counts_fake: Vec<u64>,
}

impl Histogram {
    pub fn build(
        dataset_id: &str,
        reals: &[f64],
        fakes: &[f64],
        bins: usize,
        range: (f64, f64),
    ) -> Result<Self, SimError> {
        let counts_real = histogram(reals, bins, range)?;
        let counts_fake = histogram(fakes, bins, range)?;
        let width = (range.1 - range.0) / bins as f64;
        let mut bin_edges: Vec<f64> = (0..bins).map(|i| range.0 + i as f64 * width).collect();
        bin_edges.push(range.1);
        Ok(Histogram {
            dataset_id: dataset_id.to_string(),
            bin_edges,
            counts_real,
            counts_fake,
        })
    }
}
