//! Patch-level image–text alignment: cosine scores, forgery probabilities and the
//! three-term objective (global BCE plus two margin ranking terms) with analytic
//! gradients down to the patch features and text embeddings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::PatchLabels;

/// Vectors shorter than this are rejected before any cosine.
pub const MIN_NORM: f64 = 1e-12;
/// Probability clamp for the cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LossError {
    #[error("zero-norm vector: {0}")]
    ZeroNormVector(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn checked_norm(v: &[f64], what: impl FnOnce() -> String) -> Result<f64, LossError> {
    let n = norm(v);
    if !(n >= MIN_NORM) || !n.is_finite() {
        return Err(LossError::ZeroNormVector(what()));
    }
    Ok(n)
}

/// Cosine similarity.
pub fn similarity(f: &[f64], t: &[f64]) -> Result<f64, LossError> {
    if f.len() != t.len() {
        return Err(LossError::DimMismatch(format!("{} vs {}", f.len(), t.len())));
    }
    let nf = checked_norm(f, || "feature".into())?;
    let nt = checked_norm(t, || "text".into())?;
    Ok((dot(f, t) / (nf * nt)).clamp(-1.0, 1.0))
}

/// Gradients of cos(f, t) with respect to f and t.
fn similarity_grad(f: &[f64], t: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
    let (nf, nt) = (norm(f), norm(t));
    let df = f
        .iter()
        .zip(t)
        .map(|(&fi, &ti)| ti / (nf * nt) - s * fi / (nf * nf))
        .collect();
    let dt = f
        .iter()
        .zip(t)
        .map(|(&fi, &ti)| fi / (nf * nt) - s * ti / (nt * nt))
        .collect();
    (df, dt)
}

/// Numerically stable logistic.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax over (s_fake, s_real), i.e. the logistic of their difference.
pub fn forgery_prob(s_fake: f64, s_real: f64) -> f64 {
    sigmoid(s_fake - s_real)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatures {
    pub cls: Vec<f64>,
    pub patches: Vec<Vec<f64>>,
}

impl PatchFeatures {
    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddings {
    pub t_real: Vec<f64>,
    pub t_fake: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScores {
    pub global_p: f64,
    pub global_s_fake: f64,
    pub global_s_real: f64,
    pub patch_p: Vec<f64>,
    pub patch_s_fake: Vec<f64>,
    pub patch_s_real: Vec<f64>,
}

pub fn patch_scores(features: &PatchFeatures, text: &TextEmbeddings) -> Result<PatchScores, LossError> {
    let d = features.dim();
    if text.t_real.len() != d || text.t_fake.len() != d {
        return Err(LossError::DimMismatch(format!(
            "features have dim {d}, text has {} and {}",
            text.t_real.len(),
            text.t_fake.len()
        )));
    }
    checked_norm(&text.t_real, || "t_real".into())?;
    checked_norm(&text.t_fake, || "t_fake".into())?;
    checked_norm(&features.cls, || "cls".into())?;
    let global_s_fake = similarity(&features.cls, &text.t_fake)?;
    let global_s_real = similarity(&features.cls, &text.t_real)?;
    let p = features.n_patches();
    let (mut patch_p, mut patch_s_fake, mut patch_s_real) =
        (Vec::with_capacity(p), Vec::with_capacity(p), Vec::with_capacity(p));
    for (i, f) in features.patches.iter().enumerate() {
        if f.len() != d {
            return Err(LossError::DimMismatch(format!("patch {i} has dim {}, expected {d}", f.len())));
        }
        checked_norm(f, || format!("patch {i}"))?;
        let sf = similarity(f, &text.t_fake)?;
        let sr = similarity(f, &text.t_real)?;
        patch_s_fake.push(sf);
        patch_s_real.push(sr);
        patch_p.push(forgery_prob(sf, sr));
    }
    Ok(PatchScores {
        global_p: forgery_prob(global_s_fake, global_s_real),
        global_s_fake,
        global_s_real,
        patch_p,
        patch_s_fake,
        patch_s_real,
    })
}

/// `max(0, m - (hi - lo))` and its derivative with respect to `hi`
/// (the derivative with respect to `lo` is the negation). Zero at the kink.
fn hinge(m: f64, hi: f64, lo: f64) -> (f64, f64) {
    let v = m - (hi - lo);
    if v > 0.0 {
        (v, -1.0)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub value: f64,
    /// One gradient vector per input image (zeros for skipped images).
    pub grads: Vec<Vec<f64>>,
    pub n_used: usize,
    pub n_skipped: usize,
    /// Every image was skipped; `value` is then 0.
    pub no_usable: bool,
}

/// Intra-image ranking: forged patches should outscore authentic ones by `m`.
///
/// Each entry is one fake image's patch scores and patch labels. Images without
/// both forged and authentic patches are skipped.
pub fn loss_rank_intra(images: &[(&[f64], &[u8])], m: f64) -> Result<RankOutcome, LossError> {
    let mut grads = Vec::with_capacity(images.len());
    let mut total = 0.0;
    let mut used = 0usize;
    for (k, (scores, labels)) in images.iter().enumerate() {
        if scores.len() != labels.len() {
            return Err(LossError::DimMismatch(format!(
                "image {k}: {} scores, {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let mut g = vec![0.0; scores.len()];
        let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        if fg.is_empty() || bg.is_empty() {
            grads.push(g);
            continue;
        }
        used += 1;
        let n_terms = (fg.len() * bg.len()) as f64;
        let mut acc = 0.0;
        for &a in &fg {
            for &b in &bg {
                let (v, d) = hinge(m, scores[a], scores[b]);
                acc += v;
                g[a] += d / n_terms;
                g[b] -= d / n_terms;
            }
        }
        total += acc / n_terms;
        grads.push(g);
    }
    finish_rank(total, grads, used, images.len())
}

fn finish_rank(
    total: f64,
    mut grads: Vec<Vec<f64>>,
    used: usize,
    n: usize,
) -> Result<RankOutcome, LossError> {
    if used > 0 {
        let scale = 1.0 / used as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(RankOutcome {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        grads,
        n_used: used,
        n_skipped: n - used,
        no_usable: used == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub value: f64,
    pub grads_fake: Vec<Vec<f64>>,
    pub grads_real: Vec<Vec<f64>>,
    pub n_used: usize,
    pub n_skipped: usize,
    pub no_usable: bool,
}

/// Cross-sample ranking: at every forged patch of a fake image, its score should
/// beat the same patch of the paired real image by `m`.
///
/// Each entry is (fake scores, real scores, fake patch labels).
pub fn loss_rank_pair(pairs: &[(&[f64], &[f64], &[u8])], m: f64) -> Result<PairOutcome, LossError> {
    let mut grads_fake = Vec::with_capacity(pairs.len());
    let mut grads_real = Vec::with_capacity(pairs.len());
    let mut total = 0.0;
    let mut used = 0usize;
    for (k, (fake, real, labels)) in pairs.iter().enumerate() {
        if fake.len() != real.len() || fake.len() != labels.len() {
            return Err(LossError::DimMismatch(format!(
                "pair {k}: {} fake scores, {} real scores, {} labels",
                fake.len(),
                real.len(),
                labels.len()
            )));
        }
        let mut gf = vec![0.0; fake.len()];
        let mut gr = vec![0.0; real.len()];
        let forged: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        if forged.is_empty() {
            grads_fake.push(gf);
            grads_real.push(gr);
            continue;
        }
        used += 1;
        let n_terms = forged.len() as f64;
        let mut acc = 0.0;
        for &i in &forged {
            let (v, d) = hinge(m, fake[i], real[i]);
            acc += v;
            gf[i] += d / n_terms;
            gr[i] -= d / n_terms;
        }
        total += acc / n_terms;
        grads_fake.push(gf);
        grads_real.push(gr);
    }
    let scale = if used > 0 { 1.0 / used as f64 } else { 0.0 };
    for g in grads_fake.iter_mut().chain(grads_real.iter_mut()) {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(PairOutcome {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        grads_fake,
        grads_real,
        n_used: used,
        n_skipped: pairs.len() - used,
        no_usable: used == 0,
    })
}

/// Mean binary cross-entropy on clamped probabilities, with its exact gradient.
/// The gradient is zero where the clamp is active.
pub fn loss_cls(probs: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>), LossError> {
    if probs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(LossError::DimMismatch(format!(
            "{} probabilities, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
        if y == 1 {
            total -= q.ln();
            grad.push(if inside { -1.0 / (q * n) } else { 0.0 });
        } else {
            total -= (1.0 - q).ln();
            grad.push(if inside { 1.0 / ((1.0 - q) * n) } else { 0.0 });
        }
    }
    Ok((total / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.3,
            lambda2: 0.2,
            margin: 0.1,
        }
    }
}

impl LossWeights {
    /// `l_cls + lambda1 * intra + lambda2 * pair`.
    pub fn combine(&self, l_cls: f64, intra: f64, pair: f64) -> f64 {
        l_cls + self.lambda1 * intra + self.lambda2 * pair
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("margin", self.margin)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Which per-patch quantity the ranking terms compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankedScore {
    /// The forgery probability p_i.
    #[default]
    Probability,
    /// The raw fake-prompt cosine s_fake.
    Similarity,
    /// s_fake - s_real.
    Difference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_rank_intra: f64,
    pub l_rank_pair: f64,
    pub l_total: f64,
    pub n_fake_images_used: usize,
    pub n_pairs_used: usize,
    pub n_skipped: usize,
    pub n_fake_images_skipped: usize,
    pub n_pairs_skipped: usize,
    pub no_usable_fake_images: bool,
    pub no_usable_pairs: bool,
    pub ranked: RankedScore,
    pub weights: LossWeights,
}

/// Precomputed scores for an item with no features: the global probability and the
/// per-patch ranked scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub global_p: f64,
    pub patches: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemInput {
    Features { features: PatchFeatures },
    Scores { scores: ScoreInput },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// 1 = fake, 0 = real.
    pub label: u8,
    /// Patch-resolution forgery labels; fake items without them skip both ranking terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_labels: Option<PatchLabels>,
    #[serde(flatten)]
    pub input: ItemInput,
}

impl BatchItem {
    fn n_patches(&self) -> usize {
        match &self.input {
            ItemInput::Features { features } => features.n_patches(),
            ItemInput::Scores { scores } => scores.patches.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub fake: usize,
    pub real: usize,
}

/// A loss batch as exchanged on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<TextEmbeddings>,
    pub items: Vec<BatchItem>,
    #[serde(default)]
    pub pairs: Vec<PairRef>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ranked: RankedScore,
}

impl Batch {
    pub fn from_json(text: &str) -> Result<Self, LossError> {
        let b: Batch =
            serde_json::from_str(text).map_err(|e| LossError::InvalidBatch(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.items.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        self.weights.validate()?;
        let mut dim = None;
        for (k, it) in self.items.iter().enumerate() {
            if it.label > 1 {
                return Err(LossError::InvalidBatch(format!("item {k}: label {}", it.label)));
            }
            if let Some(pl) = &it.patch_labels {
                if pl.labels.len() != it.n_patches() || pl.grid_h * pl.grid_w != pl.labels.len() {
                    return Err(LossError::DimMismatch(format!(
                        "item {k}: {} patch labels on a {}x{} grid for {} patches",
                        pl.labels.len(),
                        pl.grid_h,
                        pl.grid_w,
                        it.n_patches()
                    )));
                }
                if pl.labels.iter().any(|&l| l > 1) {
                    return Err(LossError::InvalidBatch(format!("item {k}: non-binary patch label")));
                }
            }
            match &it.input {
                ItemInput::Features { features } => {
                    if self.text.is_none() {
                        return Err(LossError::InvalidBatch(format!(
                            "item {k} has features but the batch has no text embeddings"
                        )));
                    }
                    let d = features.dim();
                    if *dim.get_or_insert(d) != d {
                        return Err(LossError::DimMismatch(format!("item {k}: dim {d}")));
                    }
                }
                ItemInput::Scores { scores } => {
                    if !(scores.global_p > 0.0 && scores.global_p < 1.0) {
                        return Err(LossError::InvalidBatch(format!(
                            "item {k}: global_p {} outside (0, 1)",
                            scores.global_p
                        )));
                    }
                    if scores.patches.iter().any(|v| !v.is_finite()) {
                        return Err(LossError::InvalidBatch(format!("item {k}: non-finite score")));
                    }
                }
            }
        }
        for (k, p) in self.pairs.iter().enumerate() {
            let (f, r) = match (self.items.get(p.fake), self.items.get(p.real)) {
                (Some(f), Some(r)) => (f, r),
                _ => return Err(LossError::InvalidBatch(format!("pair {k}: index out of range"))),
            };
            if f.label != 1 || r.label != 0 {
                return Err(LossError::InvalidBatch(format!(
                    "pair {k}: expected a fake item then a real item"
                )));
            }
            if f.n_patches() != r.n_patches() {
                return Err(LossError::DimMismatch(format!(
                    "pair {k}: {} vs {} patches",
                    f.n_patches(),
                    r.n_patches()
                )));
            }
        }
        Ok(())
    }

    /// Features of every feature item, in item order; `None` for score items.
    pub fn features(&self) -> Vec<Option<&PatchFeatures>> {
        self.items
            .iter()
            .map(|it| match &it.input {
                ItemInput::Features { features } => Some(features),
                ItemInput::Scores { .. } => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrad {
    pub cls: Vec<f64>,
    pub patches: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchGrads {
    /// Gradient of l_total with respect to each item's global probability.
    pub global_p: Vec<f64>,
    /// Gradient with respect to each item's ranked patch scores.
    pub ranked: Vec<Vec<f64>>,
    /// Feature gradients for feature items.
    pub features: Vec<Option<FeatureGrad>>,
    pub t_real: Option<Vec<f64>>,
    pub t_fake: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalOutcome {
    pub breakdown: LossBreakdown,
    pub grads: BatchGrads,
}

struct ItemScores {
    global_p: f64,
    ranked: Vec<f64>,
    full: Option<PatchScores>,
}

fn item_scores(batch: &Batch) -> Result<Vec<ItemScores>, LossError> {
    batch
        .items
        .iter()
        .map(|it| match &it.input {
            ItemInput::Features { features } => {
                let text = batch.text.as_ref().expect("validated");
                let s = patch_scores(features, text)?;
                let ranked = match batch.ranked {
                    RankedScore::Probability => s.patch_p.clone(),
                    RankedScore::Similarity => s.patch_s_fake.clone(),
                    RankedScore::Difference => s
                        .patch_s_fake
                        .iter()
                        .zip(&s.patch_s_real)
                        .map(|(f, r)| f - r)
                        .collect(),
                };
                Ok(ItemScores {
                    global_p: s.global_p,
                    ranked,
                    full: Some(s),
                })
            }
            ItemInput::Scores { scores } => Ok(ItemScores {
                global_p: scores.global_p,
                ranked: scores.patches.clone(),
                full: None,
            }),
        })
        .collect()
}

/// Weighted three-term objective with gradients through the probabilities and
/// cosines down to features and text embeddings.
pub fn total_loss(batch: &Batch) -> Result<TotalOutcome, LossError> {
    batch.validate()?;
    let w = batch.weights;
    let scores = item_scores(batch)?;
    let n = batch.items.len();

    let probs: Vec<f64> = scores.iter().map(|s| s.global_p).collect();
    let labels: Vec<u8> = batch.items.iter().map(|it| it.label).collect();
    let (l_cls, g_cls) = loss_cls(&probs, &labels)?;

    let fake_idx: Vec<usize> = (0..n)
        .filter(|&k| batch.items[k].label == 1 && batch.items[k].patch_labels.is_some())
        .collect();
    let intra_in: Vec<(&[f64], &[u8])> = fake_idx
        .iter()
        .map(|&k| {
            (
                scores[k].ranked.as_slice(),
                batch.items[k].patch_labels.as_ref().expect("filtered").labels.as_slice(),
            )
        })
        .collect();
    let intra = loss_rank_intra(&intra_in, w.margin)?;

    // pairs whose fake has no patch labels count as skipped
    let no_labels: Vec<u8> = Vec::new();
    let pair_in: Vec<(&[f64], &[f64], &[u8])> = batch
        .pairs
        .iter()
        .map(|p| {
            let labels = batch.items[p.fake]
                .patch_labels
                .as_ref()
                .map(|pl| pl.labels.as_slice())
                .unwrap_or(&no_labels);
            let (f, r) = (scores[p.fake].ranked.as_slice(), scores[p.real].ranked.as_slice());
            if labels.is_empty() {
                (&f[..0], &r[..0], labels)
            } else {
                (f, r, labels)
            }
        })
        .collect();
    let pair = loss_rank_pair(&pair_in, w.margin)?;

    let l_total = w.combine(l_cls, intra.value, pair.value);

    // d l_total / d ranked score, per item
    let mut g_ranked: Vec<Vec<f64>> = scores.iter().map(|s| vec![0.0; s.ranked.len()]).collect();
    for (slot, &k) in fake_idx.iter().enumerate() {
        for (g, d) in g_ranked[k].iter_mut().zip(&intra.grads[slot]) {
            *g += w.lambda1 * d;
        }
    }
    for (slot, p) in batch.pairs.iter().enumerate() {
        for (g, d) in g_ranked[p.fake].iter_mut().zip(&pair.grads_fake[slot]) {
            *g += w.lambda2 * d;
        }
        for (g, d) in g_ranked[p.real].iter_mut().zip(&pair.grads_real[slot]) {
            *g += w.lambda2 * d;
        }
    }

    let mut features_grad = Vec::with_capacity(n);
    let (mut gt_real, mut gt_fake) = match &batch.text {
        Some(t) => (Some(vec![0.0; t.t_real.len()]), Some(vec![0.0; t.t_fake.len()])),
        None => (None, None),
    };
    for (k, it) in batch.items.iter().enumerate() {
        let (ItemInput::Features { features }, Some(full)) = (&it.input, &scores[k].full) else {
            features_grad.push(None);
            continue;
        };
        let text = batch.text.as_ref().expect("validated");
        let gtr = gt_real.as_mut().expect("text present");
        let gtf = gt_fake.as_mut().expect("text present");
        let mut push = |f: &[f64], s_fake: f64, s_real: f64, d_sf: f64, d_sr: f64, out: &mut Vec<f64>| {
            let (df_f, dt_f) = similarity_grad(f, &text.t_fake, s_fake);
            let (df_r, dt_r) = similarity_grad(f, &text.t_real, s_real);
            for i in 0..f.len() {
                out[i] += d_sf * df_f[i] + d_sr * df_r[i];
                gtf[i] += d_sf * dt_f[i];
                gtr[i] += d_sr * dt_r[i];
            }
        };
        let d = features.dim();
        let mut g_cls_vec = vec![0.0; d];
        let gp = g_cls[k];
        let dp = gp * full.global_p * (1.0 - full.global_p);
        push(&features.cls, full.global_s_fake, full.global_s_real, dp, -dp, &mut g_cls_vec);
        let mut g_patches = Vec::with_capacity(features.n_patches());
        for (i, f) in features.patches.iter().enumerate() {
            let g = g_ranked[k][i];
            let (d_sf, d_sr) = match batch.ranked {
                RankedScore::Probability => {
                    let p = full.patch_p[i];
                    let c = g * p * (1.0 - p);
                    (c, -c)
                }
                RankedScore::Similarity => (g, 0.0),
                RankedScore::Difference => (g, -g),
            };
            let mut gv = vec![0.0; d];
            if g != 0.0 {
                push(f, full.patch_s_fake[i], full.patch_s_real[i], d_sf, d_sr, &mut gv);
            }
            g_patches.push(gv);
        }
        features_grad.push(Some(FeatureGrad {
            cls: g_cls_vec,
            patches: g_patches,
        }));
    }

    Ok(TotalOutcome {
        breakdown: LossBreakdown {
            l_cls,
            l_rank_intra: intra.value,
            l_rank_pair: pair.value,
            l_total,
            n_fake_images_used: intra.n_used,
            n_pairs_used: pair.n_used,
            n_skipped: intra.n_skipped + pair.n_skipped,
            n_fake_images_skipped: intra.n_skipped,
            n_pairs_skipped: pair.n_skipped,
            no_usable_fake_images: intra.no_usable,
            no_usable_pairs: pair.no_usable,
            ranked: batch.ranked,
            weights: w,
        },
        grads: BatchGrads {
            global_p: g_cls,
            ranked: g_ranked,
            features: features_grad,
            t_real: gt_real,
            t_fake: gt_fake,
        },
    })
}

/// Smallest distance of any active hinge argument from its kink, or of any global
/// probability from the clamp edges. Finite differences are reliable when this is
/// comfortably larger than the step.
pub fn kink_distance(batch: &Batch) -> Result<f64, LossError> {
    batch.validate()?;
    let scores = item_scores(batch)?;
    let m = batch.weights.margin;
    let mut best = f64::INFINITY;
    for s in &scores {
        best = best.min(s.global_p - PROB_EPS).min(1.0 - PROB_EPS - s.global_p);
    }
    for (k, it) in batch.items.iter().enumerate() {
        let Some(pl) = it.patch_labels.as_ref().filter(|_| it.label == 1) else {
            continue;
        };
        let r = &scores[k].ranked;
        let fg: Vec<usize> = pl.forged().collect();
        let bg: Vec<usize> = pl.authentic().collect();
        if fg.is_empty() || bg.is_empty() {
            continue;
        }
        for &a in &fg {
            for &b in &bg {
                best = best.min((m - (r[a] - r[b])).abs());
            }
        }
    }
    for p in &batch.pairs {
        if let Some(pl) = &batch.items[p.fake].patch_labels {
            for i in pl.forged() {
                let v = m - (scores[p.fake].ranked[i] - scores[p.real].ranked[i]);
                best = best.min(v.abs());
            }
        }
    }
    Ok(best)
}

/// Floor on the denominator of the relative gradient error, so coordinates whose
/// true gradient is essentially zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub step: f64,
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Where the worst relative error occurred.
    pub worst: String,
    pub kink_distance: f64,
}

fn feature_mut(b: &mut Batch, k: usize) -> &mut PatchFeatures {
    match &mut b.items[k].input {
        ItemInput::Features { features } => features,
        ItemInput::Scores { .. } => unreachable!("only feature items are perturbed"),
    }
}

/// Central finite differences of l_total over every feature and text coordinate.
pub fn grad_check(batch: &Batch, step: f64) -> Result<GradCheck, LossError> {
    let analytic = total_loss(batch)?.grads;
    let loss_at = |b: &Batch| total_loss(b).map(|o| o.breakdown.l_total);
    let mut work = batch.clone();
    let mut report = GradCheck {
        step,
        n_coords: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        kink_distance: kink_distance(batch)?,
    };
    let record = |report: &mut GradCheck, a: f64, num: f64, place: String| {
        let abs = (a - num).abs();
        let rel = abs / a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
        report.n_coords += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = place;
        }
    };

    fn central<F: FnMut(&mut Batch, f64)>(
        work: &mut Batch,
        step: f64,
        mut set: F,
        loss_at: &dyn Fn(&Batch) -> Result<f64, LossError>,
    ) -> Result<f64, LossError> {
        set(work, step);
        let up = loss_at(work)?;
        set(work, -2.0 * step);
        let down = loss_at(work)?;
        set(work, step);
        Ok((up - down) / (2.0 * step))
    }

    for k in 0..batch.items.len() {
        let Some(fg) = analytic.features[k].clone() else {
            continue;
        };
        for i in 0..fg.cls.len() {
            let num = central(
                &mut work,
                step,
                |b, dv| feature_mut(b, k).cls[i] += dv,
                &loss_at,
            )?;
            record(&mut report, fg.cls[i], num, format!("item {k} cls[{i}]"));
        }
        for (p, gp) in fg.patches.iter().enumerate() {
            for i in 0..gp.len() {
                let num = central(
                    &mut work,
                    step,
                    |b, dv| feature_mut(b, k).patches[p][i] += dv,
                    &loss_at,
                )?;
                record(&mut report, gp[i], num, format!("item {k} patch {p}[{i}]"));
            }
        }
    }
    if let (Some(gr), Some(gf)) = (&analytic.t_real, &analytic.t_fake) {
        for i in 0..gr.len() {
            let num = central(
                &mut work,
                step,
                |b, dv| b.text.as_mut().expect("text").t_real[i] += dv,
                &loss_at,
            )?;
            record(&mut report, gr[i], num, format!("t_real[{i}]"));
            let num = central(
                &mut work,
                step,
                |b, dv| b.text.as_mut().expect("text").t_fake[i] += dv,
                &loss_at,
            )?;
            record(&mut report, gf[i], num, format!("t_fake[{i}]"));
        }
    }
    Ok(report)
}

/// A random feature batch of `n_pairs` fake/real pairs with `n_patches` patches of
/// dimension `dim`. Fakes get random patch labels with at least one forged and one
/// authentic patch. Useful for gradient checks and demos.
pub fn random_batch<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    n_patches: usize,
    n_pairs: usize,
    weights: LossWeights,
) -> Batch {
    assert!(n_patches >= 2, "need room for forged and authentic patches");
    let vector = |rng: &mut R| -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    };
    let text = TextEmbeddings {
        t_real: vector(rng),
        t_fake: vector(rng),
    };
    let grid_h = (1..=n_patches)
        .filter(|h| n_patches % h == 0 && h * h <= n_patches)
        .max()
        .unwrap_or(1);
    let mut items = Vec::with_capacity(2 * n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let mut labels: Vec<u8> = (0..n_patches).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[n_patches - 1] = 0;
        for (label, tag, pl) in [
            (
                1u8,
                "fake",
                Some(PatchLabels {
                    grid_h,
                    grid_w: n_patches / grid_h,
                    labels,
                }),
            ),
            (0u8, "real", None),
        ] {
            let features = PatchFeatures {
                cls: vector(rng),
                patches: (0..n_patches).map(|_| vector(rng)).collect(),
            };
            items.push(BatchItem {
                id: Some(format!("{tag}-{k}")),
                label,
                patch_labels: pl,
                input: ItemInput::Features { features },
            });
        }
        pairs.push(PairRef {
            fake: 2 * k,
            real: 2 * k + 1,
        });
    }
    Batch {
        text: Some(text),
        items,
        pairs,
        weights,
        ranked: RankedScore::Probability,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn similarity_examples() {
        assert!(close(similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(close(similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5f64.sqrt(), 1e-15));
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(LossError::ZeroNormVector(_))));
        assert!(matches!(similarity(&[1.0], &[1.0, 0.0]), Err(LossError::DimMismatch(_))));
    }

    #[test]
    fn forgery_prob_examples() {
        assert_eq!(forgery_prob(0.7, 0.7), 0.5);
        // logistic(1) = e / (1 + e)
        let e = std::f64::consts::E;
        assert!(close(forgery_prob(1.0, 0.0), e / (1.0 + e), 1e-15));
        assert!(close(forgery_prob(1.0, 0.0), 0.73106, 1e-5));
        assert_eq!(forgery_prob(800.0, -800.0), 1.0);
        assert_eq!(forgery_prob(-800.0, 800.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            assert!(close(forgery_prob(a, b) + forgery_prob(b, a), 1.0, 1e-15));
        }
    }

    #[test]
    fn patch_scores_worked_example() {
        // unit vectors at 0 and 90 degrees for the prompts; patches at 30 and 120
        let text = TextEmbeddings {
            t_real: vec![1.0, 0.0],
            t_fake: vec![0.0, 1.0],
        };
        let deg = |a: f64| vec![a.to_radians().cos(), a.to_radians().sin()];
        let f = PatchFeatures {
            cls: deg(45.0),
            patches: vec![deg(30.0), deg(120.0)],
        };
        let s = patch_scores(&f, &text).unwrap();
        assert!(close(s.global_p, 0.5, 1e-15));
        // patch 0: s_fake = sin 30 = 0.5, s_real = cos 30
        assert!(close(s.patch_s_fake[0], 0.5, 1e-15));
        assert!(close(s.patch_s_real[0], 3f64.sqrt() / 2.0, 1e-15));
        let p0 = 1.0 / (1.0 + (3f64.sqrt() / 2.0 - 0.5).exp());
        assert!(close(s.patch_p[0], p0, 1e-15));
        // patch 1: s_fake = sin 120, s_real = cos 120 = -0.5
        let p1 = 1.0 / (1.0 + (-(3f64.sqrt() / 2.0 + 0.5)).exp());
        assert!(close(s.patch_p[1], p1, 1e-15));
    }

    #[test]
    fn patch_scores_degenerate_cases() {
        let text = TextEmbeddings {
            t_real: vec![1.0, 2.0, 3.0],
            t_fake: vec![-1.0, 0.5, 2.0],
        };
        let cls = vec![0.2, -0.4, 1.0];
        let f = PatchFeatures {
            cls: cls.clone(),
            patches: vec![cls.clone(); 3],
        };
        let s = patch_scores(&f, &text).unwrap();
        assert!(s.patch_p.iter().all(|&p| p == s.global_p));
        let same = TextEmbeddings {
            t_real: text.t_real.clone(),
            t_fake: text.t_real.clone(),
        };
        let s = patch_scores(&f, &same).unwrap();
        assert!(s.patch_p.iter().chain([&s.global_p]).all(|&p| p == 0.5));
        let bad = PatchFeatures {
            cls,
            patches: vec![vec![1.0, 0.0, 0.0], vec![0.0; 3]],
        };
        assert_eq!(
            patch_scores(&bad, &text),
            Err(LossError::ZeroNormVector("patch 1".into()))
        );
    }

    #[test]
    fn rank_intra_examples() {
        let scores = [0.5, 0.45, 0.6];
        let labels = [1u8, 0, 0];
        let r = loss_rank_intra(&[(&scores, &labels)], 0.1).unwrap();
        assert!(close(r.value, 0.125, 1e-15));
        assert_eq!(r.grads[0], vec![-1.0, 0.5, 0.5]);

        let ok = [0.9, 0.1, 0.2];
        let r = loss_rank_intra(&[(&ok, &labels)], 0.1).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads[0].iter().all(|&g| g == 0.0));

        let all_fg = [1u8, 1, 1];
        let r = loss_rank_intra(&[(&scores, &all_fg)], 0.1).unwrap();
        assert_eq!((r.value, r.n_skipped, r.no_usable), (0.0, 1, true));
    }

    #[test]
    fn rank_pair_examples() {
        let fake = [0.6, 0.1];
        let real = [0.55, 0.9];
        let r = loss_rank_pair(&[(&fake, &real, &[1, 0])], 0.1).unwrap();
        assert!(close(r.value, 0.05, 1e-15));
        assert_eq!(r.grads_fake[0], vec![-1.0, 0.0]);
        assert_eq!(r.grads_real[0], vec![1.0, 0.0]);

        let r = loss_rank_pair(&[(&[0.9, 0.1], &real, &[1, 0])], 0.1).unwrap();
        assert_eq!(r.value, 0.0);

        let r = loss_rank_pair(&[(&fake, &real, &[0, 0])], 0.1).unwrap();
        assert_eq!((r.value, r.n_skipped, r.no_usable), (0.0, 1, true));
    }

    #[test]
    fn cls_examples() {
        let (v, _) = loss_cls(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(v <= -(1.0 - PROB_EPS).ln() + 1e-18);
        let (v, _) = loss_cls(&[0.5; 4], &[1, 0, 1, 0]).unwrap();
        assert!(close(v, std::f64::consts::LN_2, 1e-15));
        let (v, g) = loss_cls(&[0.9, 0.2], &[1, 0]).unwrap();
        assert!(close(v, -(0.9f64.ln() + 0.8f64.ln()) / 2.0, 1e-15));
        assert!(close(v, 0.16425, 1e-5));
        assert!(close(g[0], -1.0 / 1.8, 1e-15));
        assert!(close(g[1], 1.0 / 1.6, 1e-15));
        assert_eq!(loss_cls(&[], &[]), Err(LossError::EmptyBatch));
    }

    #[test]
    fn weights_recompose() {
        let w = LossWeights::default();
        assert!(close(w.combine(0.5, 0.2, 0.1), 0.58, 1e-15));
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..w
        };
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(2), 4, 4, 2, zero);
        let o = total_loss(&b).unwrap();
        assert_eq!(o.breakdown.l_total, o.breakdown.l_cls);
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
            .fold(0.0, f64::max)
    }

    /// Scores where every hinge argument stays at least `gap` from its kink.
    fn smooth_scores(rng: &mut ChaCha8Rng, n: usize, m: f64, gap: f64, pairs_with: &[f64]) -> Vec<f64> {
        loop {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let ok = (0..n).all(|a| {
                (0..n).all(|b| a == b || (m - (s[a] - s[b])).abs() > gap)
                    && pairs_with.get(a).is_none_or(|&r| (m - (s[a] - r)).abs() > gap)
            });
            if ok {
                return s;
            }
        }
    }

    #[test]
    fn rank_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 0.1;
        for _ in 0..100 {
            let n = 6;
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let s = smooth_scores(&mut rng, n, m, 1e-3, &[]);
            let r = loss_rank_intra(&[(&s, &labels)], m).unwrap();
            let num = fd(|x| loss_rank_intra(&[(x, &labels)], m).unwrap().value, &s, 1e-5);
            assert!(rel_err(&r.grads[0], &num) < 1e-5);

            let real: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let fake = smooth_scores(&mut rng, n, m, 1e-3, &real);
            let p = loss_rank_pair(&[(&fake, &real, &labels)], m).unwrap();
            let nf = fd(|x| loss_rank_pair(&[(x, &real, &labels)], m).unwrap().value, &fake, 1e-5);
            assert!(rel_err(&p.grads_fake[0], &nf) < 1e-5);
        }
    }

    #[test]
    fn cls_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..0.95)).collect();
            let y: Vec<u8> = (0..5).map(|_| rng.random_range(0..2)).collect();
            let (_, g) = loss_cls(&p, &y).unwrap();
            let num = fd(|x| loss_cls(x, &y).unwrap().0, &p, 1e-5);
            assert!(rel_err(&g, &num) < 1e-5);
        }
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 10 {
            let b = random_batch(&mut rng, 8, 16, 1, LossWeights::default());
            if kink_distance(&b).unwrap() < 1e-3 {
                continue;
            }
            let g = grad_check(&b, 1e-5).unwrap();
            assert!(g.max_rel_err < 1e-5, "{g:?}");
            assert!(g.n_coords == 2 * 17 * 8 + 16);
            checked += 1;
        }
    }

    #[test]
    fn other_ranked_quantities_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for ranked in [RankedScore::Similarity, RankedScore::Difference] {
            let mut checked = 0;
            while checked < 3 {
                let mut b = random_batch(&mut rng, 4, 4, 1, LossWeights::default());
                b.ranked = ranked;
                if kink_distance(&b).unwrap() < 1e-3 {
                    continue;
                }
                let g = grad_check(&b, 1e-5).unwrap();
                assert!(g.max_rel_err < 1e-5, "{ranked:?} {g:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn score_batch_reproduces_worked_examples() {
        let json = r#"{
            "items": [
                {"label": 1, "scores": {"global_p": 0.9, "patches": [0.5, 0.45, 0.6]},
                 "patch_labels": {"grid_h": 1, "grid_w": 3, "labels": [1, 0, 0]}},
                {"label": 0, "scores": {"global_p": 0.2, "patches": [0.45, 0.5, 0.5]}}
            ],
            "pairs": [{"fake": 0, "real": 1}]
        }"#;
        let b = Batch::from_json(json).unwrap();
        let o = total_loss(&b).unwrap().breakdown;
        assert!(close(o.l_cls, 0.16425, 1e-5));
        assert!(close(o.l_rank_intra, 0.125, 1e-15));
        assert!(close(o.l_rank_pair, 0.05, 1e-15));
        assert!(close(o.l_total, o.l_cls + 0.3 * o.l_rank_intra + 0.2 * o.l_rank_pair, 1e-12));
    }

    #[test]
    fn batch_validation() {
        let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 1, LossWeights::default());
        b.pairs[0] = PairRef { fake: 1, real: 0 };
        assert!(matches!(b.validate(), Err(LossError::InvalidBatch(_))));
        let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 1, LossWeights::default());
        b.text = None;
        assert!(matches!(b.validate(), Err(LossError::InvalidBatch(_))));
        let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 1, LossWeights::default());
        b.weights.lambda1 = -1.0;
        assert!(matches!(b.validate(), Err(LossError::InvalidWeights(_))));
        assert!(matches!(Batch::from_json(r#"{"items": []}"#), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn batch_json_round_trip() {
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(4), 3, 4, 2, LossWeights::default());
        let text = serde_json::to_string(&b).unwrap();
        assert_eq!(Batch::from_json(&text).unwrap(), b);
    }

    proptest! {
        #[test]
        fn prob_shift_invariance(a in -4.0f64..4.0, b in -4.0f64..4.0, c in -4.0f64..4.0) {
            prop_assert!((forgery_prob(a + c, b + c) - forgery_prob(a, b)).abs() <= 1e-15);
            // dyadic inputs keep the difference exact, so the result is identical
            let q = |x: f64| (x * 1024.0).round() / 1024.0;
            prop_assert_eq!(forgery_prob(q(a) + q(c), q(b) + q(c)), forgery_prob(q(a), q(b)));
        }

        #[test]
        fn scaling_features_and_text_changes_nothing(seed in 0u64..1000, k in -8i32..8) {
            let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 4, 4, 2, LossWeights::default());
            let c = 2f64.powi(k);
            let mut scaled = b.clone();
            let t = scaled.text.as_mut().unwrap();
            t.t_real.iter_mut().chain(t.t_fake.iter_mut()).for_each(|v| *v *= c);
            for it in &mut scaled.items {
                if let ItemInput::Features { features } = &mut it.input {
                    features.cls.iter_mut().chain(features.patches.iter_mut().flatten()).for_each(|v| *v *= c);
                }
            }
            let (x, y) = (total_loss(&b).unwrap().breakdown, total_loss(&scaled).unwrap().breakdown);
            prop_assert_eq!(x, y);
        }

        #[test]
        fn breakdown_recomposes(seed in 0u64..1000, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
            let w = LossWeights { lambda1: l1, lambda2: l2, margin: 0.1 };
            let b = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 4, 4, 2, w);
            let o = total_loss(&b).unwrap().breakdown;
            prop_assert!((o.l_total - (o.l_cls + l1 * o.l_rank_intra + l2 * o.l_rank_pair)).abs() <= 1e-12);
        }

        #[test]
        fn hinge_losses_are_monotone(s in proptest::collection::vec(0.0f64..1.0, 6), i in 0usize..6, bump in 0.0f64..0.5) {
            let labels = [1u8, 1, 1, 0, 0, 0];
            let base = loss_rank_intra(&[(&s, &labels)], 0.1).unwrap().value;
            prop_assert!(base >= 0.0);
            let mut up = s.clone();
            up[i] += bump;
            let moved = loss_rank_intra(&[(&up, &labels)], 0.1).unwrap().value;
            if labels[i] == 1 {
                prop_assert!(moved <= base + 1e-15);
            } else {
                prop_assert!(moved >= base - 1e-15);
            }
            let real = vec![0.5; 6];
            let pb = loss_rank_pair(&[(&s, &real, &labels)], 0.1).unwrap().value;
            let pm = loss_rank_pair(&[(&up, &real, &labels)], 0.1).unwrap().value;
            prop_assert!(pm <= pb + 1e-15 && pb >= 0.0);
        }
    }
}
