//! Desk-scale end-to-end harness: a tiny patch model trained with the three-term
//! alignment objective on synthetic two-domain data and scored with Cross-AUC.
//!
//! Data. Every item is a grid of patch vectors. A real item is noise plus its
//! domain's nuisance offset. Its paired fake copies it, adds the planted signal to
//! the patches of one facial region and adds a weak artifact to every patch. The
//! nuisance points along the artifact direction, so a detector that leans on the
//! artifact moves its scores from one domain to the next.
//!
//! Model. Linear patch encoder, then one attention block over
//! `[mean(h), h_1, .., h_P]` with identity queries and values, a residual, and keys
//! from the shared key map or, once FaRMoE is switched on, from the region experts.
//! The first output token is the global feature; all outputs go through the
//! cosine heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment_losses::{
    forgery_prob, total_loss, Batch, BatchItem, ItemInput, LossBreakdown, LossError, LossWeights,
    PairRef, PatchFeatures, RankedScore, TextEmbeddings, MIN_NORM,
};
use crate::augmentation::landmarks::{LandmarkSet, Region};
use crate::augmentation::{downsample_mask, region_mask, PatchLabels};
use crate::cross_auc::{cross_matrix, summarize, CrossAucError, CrossAucMatrix, CrossAucSummary};
use crate::farmoe::{assign_regions, Affine, ExpertBank, MoeError, RegionMap};
use crate::roc_auc::{intra_auc, Level};
use crate::score_store::{Label, Sample, ScoreStore, VideoAggregation};
use crate::shift_sim::domain_seed;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("training diverged at step {step}: l_total = {value}")]
    DivergenceDetected { step: usize, value: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    CrossAuc(#[from] CrossAucError),
}

/// Knobs of the synthetic task. Signal, artifact and nuisance are independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub input_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixel side of one patch when rasterizing face regions.
    pub patch_px: usize,
    pub domains: Vec<String>,
    /// Real/fake pairs per domain.
    pub n_pairs: usize,
    /// Planted shift on forged patches.
    pub signal: f64,
    /// Shift on every patch of every fake.
    pub artifact: f64,
    /// Offset of domain `k` is `k * nuisance` along the artifact direction.
    pub nuisance: f64,
    pub noise: f64,
    /// Coverage above which a patch of the planted region counts as forged.
    pub plant_tau: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            grid_h: 4,
            grid_w: 4,
            patch_px: 8,
            domains: vec!["D0".into(), "D1".into()],
            n_pairs: 64,
            signal: 3.0,
            artifact: 1.5,
            nuisance: 1.5,
            noise: 1.0,
            plant_tau: 0.0,
            seed: 0,
        }
    }
}

/// Index of the planted-signal coordinate.
pub const SIGNAL_AXIS: usize = 0;
/// Index of the artifact and nuisance coordinate.
pub const ARTIFACT_AXIS: usize = 1;

impl DataSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::InvalidSpec(m));
        if self.input_dim < 2 {
            return bad(format!("input_dim {} < 2", self.input_dim));
        }
        if self.grid_h * self.grid_w < 2 || self.patch_px == 0 {
            return bad("grid needs at least two patches of positive size".into());
        }
        if self.domains.is_empty() || self.n_pairs == 0 {
            return bad("need at least one domain and one pair".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(d) = self.domains.iter().find(|d| !seen.insert(d.as_str())) {
            return bad(format!("duplicate domain {d}"));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("artifact", self.artifact),
            ("nuisance", self.nuisance),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.plant_tau) {
            return bad(format!("plant_tau = {}", self.plant_tau));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise = {}", self.noise));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub id: String,
    pub domain: String,
    /// 1 = fake.
    pub label: u8,
    /// `P` patch vectors of length `input_dim`.
    pub patches: Vec<Vec<f64>>,
    pub patch_labels: PatchLabels,
    /// For a fake, the index of the real it was made from.
    pub paired_real: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceBatch {
    pub spec: DataSpec,
    pub region_map: RegionMap,
    pub items: Vec<SyntheticItem>,
}

impl SyntheticFaceBatch {
    pub fn domain_items<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = (usize, &'a SyntheticItem)> {
        self.items.iter().enumerate().filter(move |(_, it)| it.domain == domain)
    }

    /// Keeps only the listed domains, remapping pair indices.
    pub fn restrict(&self, domains: &[String]) -> SyntheticFaceBatch {
        let mut remap = vec![None; self.items.len()];
        let mut items = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            if domains.contains(&it.domain) {
                remap[i] = Some(items.len());
                items.push(it.clone());
            }
        }
        for it in &mut items {
            it.paired_real = it.paired_real.and_then(|r| remap[r]);
        }
        SyntheticFaceBatch {
            spec: DataSpec {
                domains: domains.to_vec(),
                ..self.spec.clone()
            },
            region_map: self.region_map.clone(),
            items,
        }
    }
}

/// Patch regions of the template face on the spec's grid.
pub fn template_region_map(spec: &DataSpec) -> Result<RegionMap, ToyError> {
    let (h, w) = (spec.grid_h * spec.patch_px, spec.grid_w * spec.patch_px);
    let lm = LandmarkSet::template(h.min(w) as f64);
    Ok(assign_regions((spec.grid_h, spec.grid_w), (h, w), &lm, &Region::ALL)?)
}

/// Patch labels for planting a forgery on each of the six facial regions.
pub fn region_plants(spec: &DataSpec) -> Result<Vec<Vec<u8>>, ToyError> {
    let (h, w) = (spec.grid_h * spec.patch_px, spec.grid_w * spec.patch_px);
    let lm = LandmarkSet::template(h.min(w) as f64);
    let p = spec.n_patches();
    Region::ALL
        .iter()
        .map(|&r| {
            let mask = region_mask(&lm, &[r], h, w).map_err(|e| ToyError::InvalidSpec(e.to_string()))?;
            let labels = downsample_mask(&mask, spec.patch_px, spec.plant_tau)
                .map_err(|e| ToyError::InvalidSpec(e.to_string()))?
                .labels;
            let ones = labels.iter().filter(|&&l| l == 1).count();
            if ones > 0 && ones < p {
                return Ok(labels);
            }
            let mut cover = vec![0usize; p];
            for row in 0..h {
                for col in 0..w {
                    cover[(row / spec.patch_px) * spec.grid_w + col / spec.patch_px] += mask.get(row, col) as usize;
                }
            }
            let best = (0..p).max_by_key(|&i| (cover[i], std::cmp::Reverse(i))).expect("p >= 2");
            let mut one = vec![0u8; p];
            one[best] = 1;
            Ok(one)
        })
        .collect()
}

/// Draws `n_pairs` real/fake pairs for every domain. Each fake is forged where a
/// uniformly chosen facial region's pixel mask, downsampled to the patch grid with
/// threshold `plant_tau`, is set; if that leaves no forged or no authentic patch,
/// the single best-covered patch is forged instead.
pub fn gen_synthetic_batch<R: Rng + ?Sized>(spec: &DataSpec, rng: &mut R) -> Result<SyntheticFaceBatch, ToyError> {
    spec.validate()?;
    let map = template_region_map(spec)?;
    let p = spec.n_patches();
    let plants = region_plants(spec)?;
    let mut items = Vec::with_capacity(2 * spec.n_pairs * spec.domains.len());
    for (k, domain) in spec.domains.iter().enumerate() {
        let offset = k as f64 * spec.nuisance;
        for n in 0..spec.n_pairs {
            let real: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    let mut v: Vec<f64> = (0..spec.input_dim)
                        .map(|_| spec.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>();
                    v[ARTIFACT_AXIS] += offset;
                    v
                })
                .collect();
            let forged = plants[rng.random_range(0..plants.len())].clone();
            let fake: Vec<Vec<f64>> = real
                .iter()
                .zip(&forged)
                .map(|(v, &f)| {
                    let mut v = v.clone();
                    v[ARTIFACT_AXIS] += spec.artifact;
                    if f == 1 {
                        v[SIGNAL_AXIS] += spec.signal;
                    }
                    v
                })
                .collect();
            let real_idx = items.len();
            items.push(SyntheticItem {
                id: format!("{domain}-real-{n:04}"),
                domain: domain.clone(),
                label: 0,
                patches: real,
                patch_labels: PatchLabels {
                    grid_h: spec.grid_h,
                    grid_w: spec.grid_w,
                    labels: vec![0; p],
                },
                paired_real: None,
            });
            items.push(SyntheticItem {
                id: format!("{domain}-fake-{n:04}"),
                domain: domain.clone(),
                label: 1,
                patches: fake,
                patch_labels: PatchLabels {
                    grid_h: spec.grid_h,
                    grid_w: spec.grid_w,
                    labels: forged,
                },
                paired_real: Some(real_idx),
            });
        }
    }
    Ok(SyntheticFaceBatch {
        spec: spec.clone(),
        region_map: map,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Feature dimension.
    pub dim: usize,
    pub steps: usize,
    /// Trailing steps that train only the expert bank; needs `use_farmoe`.
    pub moe_steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub use_farmoe: bool,
    pub seed: u64,
    /// Domains the model is trained on; evaluation covers every domain.
    pub train_domains: Vec<String>,
    pub data: DataSpec,
    /// Pairs per domain in the held-out evaluation draw.
    pub eval_pairs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            steps: 400,
            moe_steps: 40,
            learning_rate: 2.0,
            weights: LossWeights::default(),
            use_farmoe: false,
            seed: 0,
            train_domains: vec!["D0".into()],
            data: DataSpec::default(),
            eval_pairs: 200,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::InvalidConfig(m));
        if self.dim == 0 || self.eval_pairs == 0 {
            return bad("dim and eval_pairs must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if self.use_farmoe && self.moe_steps > self.steps {
            return bad(format!("moe_steps {} > steps {}", self.moe_steps, self.steps));
        }
        if let Some(d) = self.train_domains.iter().find(|d| !self.data.domains.contains(d)) {
            return bad(format!("train domain {d} is not in the data spec"));
        }
        if self.train_domains.is_empty() {
            return bad("no train domains".into());
        }
        self.weights.validate()?;
        self.data.validate()
    }

    /// Steps of the second stage (experts only).
    pub fn stage2_steps(&self) -> usize {
        if self.use_farmoe {
            self.moe_steps
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dim: usize,
    pub input_dim: usize,
    /// Row-major `dim × input_dim`.
    pub encoder: Vec<f64>,
    pub encoder_bias: Vec<f64>,
    pub text: TextEmbeddings,
    pub bank: ExpertBank,
    /// Patch keys come from the experts instead of the shared key.
    pub moe_active: bool,
}

impl ToyModel {
    pub fn init<R: Rng + ?Sized>(dim: usize, input_dim: usize, k_regions: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        };
        let encoder = normal(dim * input_dim, 1.0 / (input_dim as f64).sqrt());
        let text = TextEmbeddings {
            t_real: normal(dim, 1.0),
            t_fake: normal(dim, 1.0),
        };
        let shared = Affine {
            weight: normal(dim * dim, 0.1 / (dim as f64).sqrt()),
            bias: vec![0.0; dim],
        };
        Self {
            dim,
            input_dim,
            encoder,
            encoder_bias: vec![0.0; dim],
            text,
            bank: ExpertBank::from_shared(k_regions, shared),
            moe_active: false,
        }
    }

    /// All parameters zero.
    pub fn zeros(dim: usize, input_dim: usize, k_regions: usize) -> Self {
        let zero = Affine {
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        };
        Self {
            dim,
            input_dim,
            encoder: vec![0.0; dim * input_dim],
            encoder_bias: vec![0.0; dim],
            text: TextEmbeddings {
                t_real: vec![0.0; dim],
                t_fake: vec![0.0; dim],
            },
            bank: ExpertBank::from_shared(k_regions, zero),
            moe_active: false,
        }
    }

    /// Copies the shared key into every expert and routes patch keys through them.
    pub fn activate_moe(&mut self) {
        let k = self.bank.k_regions();
        self.bank = ExpertBank::from_shared(k, self.bank.shared_key.clone());
        self.moe_active = true;
    }

    fn key_map(&self, token: usize, map: &RegionMap) -> &Affine {
        if token == 0 || !self.moe_active {
            &self.bank.shared_key
        } else {
            &self.bank.experts[map.region_of[token - 1] as usize - 1]
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }
}

/// Intermediate values of one item's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub h: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    /// Output tokens; row 0 is the global feature.
    pub out: Vec<Vec<f64>>,
}

fn matvec(w: &[f64], rows: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[i])
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn forward_item(model: &ToyModel, patches: &[Vec<f64>], map: &RegionMap) -> Result<ForwardCache, ToyError> {
    let p = patches.len();
    if p != map.n_patches() {
        return Err(ToyError::DimMismatch(format!("{p} patches, region map has {}", map.n_patches())));
    }
    if let Some(x) = patches.iter().find(|x| x.len() != model.input_dim) {
        return Err(ToyError::DimMismatch(format!(
            "patch of length {}, model expects {}",
            x.len(),
            model.input_dim
        )));
    }
    if model.moe_active {
        if let Some(&id) = map.region_of.iter().find(|&&id| id as usize > model.bank.k_regions()) {
            return Err(MoeError::UnknownRegionId {
                patch: 0,
                id,
                k: model.bank.k_regions(),
            }
            .into());
        }
    }
    let d = model.dim;
    let h: Vec<Vec<f64>> = patches
        .iter()
        .map(|x| matvec(&model.encoder, d, x, &model.encoder_bias))
        .collect();
    let mut cls = vec![0.0; d];
    for hi in &h {
        for (c, v) in cls.iter_mut().zip(hi) {
            *c += v;
        }
    }
    cls.iter_mut().for_each(|c| *c /= p as f64);
    let mut z = Vec::with_capacity(p + 1);
    z.push(cls);
    z.extend(h.iter().cloned());
    let keys: Vec<Vec<f64>> = z
        .iter()
        .enumerate()
        .map(|(j, zj)| model.key_map(j, map).apply(zj))
        .collect();
    let scale = 1.0 / (d as f64).sqrt();
    let attn: Vec<Vec<f64>> = z
        .iter()
        .map(|zi| {
            let e: Vec<f64> = keys.iter().map(|k| dot(zi, k) * scale).collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let out: Vec<Vec<f64>> = z
        .iter()
        .zip(&attn)
        .map(|(zi, ai)| {
            let mut o = zi.clone();
            for (a, zj) in ai.iter().zip(&z) {
                for (ov, zv) in o.iter_mut().zip(zj) {
                    *ov += a * zv;
                }
            }
            o
        })
        .collect();
    Ok(ForwardCache { h, z, keys, attn, out })
}

/// Cosine heads that read a zero vector as "no evidence" (probability 1/2).
fn head_prob(f: &[f64], text: &TextEmbeddings) -> f64 {
    let nf = dot(f, f).sqrt();
    let (nr, nk) = (dot(&text.t_real, &text.t_real).sqrt(), dot(&text.t_fake, &text.t_fake).sqrt());
    if nf < MIN_NORM || nr < MIN_NORM || nk < MIN_NORM {
        return 0.5;
    }
    forgery_prob(dot(f, &text.t_fake) / (nf * nk), dot(f, &text.t_real) / (nf * nr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutput {
    pub global_p: f64,
    pub patch_p: Vec<f64>,
}

pub fn forward(model: &ToyModel, batch: &SyntheticFaceBatch) -> Result<Vec<ItemOutput>, ToyError> {
    batch
        .items
        .iter()
        .map(|it| {
            let c = forward_item(model, &it.patches, &batch.region_map)?;
            Ok(ItemOutput {
                global_p: head_prob(&c.out[0], &model.text),
                patch_p: c.out[1..].iter().map(|o| head_prob(o, &model.text)).collect(),
            })
        })
        .collect()
}

/// Parameter gradients, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: Vec<f64>,
    pub encoder_bias: Vec<f64>,
    pub t_real: Vec<f64>,
    pub t_fake: Vec<f64>,
    pub shared_key: Affine,
    pub experts: Vec<Affine>,
}

impl ModelGrads {
    fn zeros(model: &ToyModel) -> Self {
        let zero = |a: &Affine| Affine {
            weight: vec![0.0; a.weight.len()],
            bias: vec![0.0; a.bias.len()],
        };
        Self {
            encoder: vec![0.0; model.encoder.len()],
            encoder_bias: vec![0.0; model.dim],
            t_real: vec![0.0; model.dim],
            t_fake: vec![0.0; model.dim],
            shared_key: zero(&model.bank.shared_key),
            experts: model.bank.experts.iter().map(zero).collect(),
        }
    }
}

/// Backpropagates output-token gradients `go` through the attention block and the
/// encoder of one item, accumulating into `g`.
fn backward_item(
    model: &ToyModel,
    patches: &[Vec<f64>],
    map: &RegionMap,
    cache: &ForwardCache,
    go: &[Vec<f64>],
    g: &mut ModelGrads,
) {
    let d = model.dim;
    let t = cache.z.len();
    let p = t - 1;
    let scale = 1.0 / (d as f64).sqrt();
    let z = &cache.z;
    let mut dz: Vec<Vec<f64>> = go.to_vec();
    let mut dk = vec![vec![0.0; d]; t];
    for i in 0..t {
        let a = &cache.attn[i];
        let da: Vec<f64> = z.iter().map(|zj| dot(&go[i], zj)).collect();
        let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for j in 0..t {
            // value path
            for c in 0..d {
                dz[j][c] += a[j] * go[i][c];
            }
            let de = a[j] * (da[j] - mean_da) * scale;
            if de != 0.0 {
                for c in 0..d {
                    dz[i][c] += de * cache.keys[j][c];
                    dk[j][c] += de * z[i][c];
                }
            }
        }
    }
    for j in 0..t {
        let routed = j > 0 && model.moe_active;
        let km = model.key_map(j, map);
        let gk = if routed {
            &mut g.experts[map.region_of[j - 1] as usize - 1]
        } else {
            &mut g.shared_key
        };
        for r in 0..d {
            if dk[j][r] == 0.0 {
                continue;
            }
            gk.bias[r] += dk[j][r];
            for c in 0..d {
                gk.weight[r * d + c] += dk[j][r] * z[j][c];
                dz[j][c] += km.weight[r * d + c] * dk[j][r];
            }
        }
    }
    let n_in = model.input_dim;
    for (i, x) in patches.iter().enumerate() {
        for r in 0..d {
            let dh = dz[i + 1][r] + dz[0][r] / p as f64;
            g.encoder_bias[r] += dh;
            for c in 0..n_in {
                g.encoder[r * n_in + c] += dh * x[c];
            }
        }
    }
}

/// Loss batch built from the model's output tokens; reals and fakes in item order,
/// fakes paired with the real they were made from.
fn loss_batch(model: &ToyModel, data: &SyntheticFaceBatch, caches: &[ForwardCache], weights: LossWeights) -> Batch {
    let items = data
        .items
        .iter()
        .zip(caches)
        .map(|(it, c)| BatchItem {
            id: None,
            label: it.label,
            patch_labels: (it.label == 1).then(|| it.patch_labels.clone()),
            input: ItemInput::Features {
                features: PatchFeatures {
                    cls: c.out[0].clone(),
                    patches: c.out[1..].to_vec(),
                },
            },
        })
        .collect();
    let pairs = data
        .items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| it.paired_real.map(|r| PairRef { fake: i, real: r }))
        .collect();
    Batch {
        text: Some(model.text.clone()),
        items,
        pairs,
        weights,
        ranked: RankedScore::Probability,
    }
}

/// Objective and parameter gradients on `data`.
pub fn loss_and_grads(
    model: &ToyModel,
    data: &SyntheticFaceBatch,
    weights: LossWeights,
) -> Result<(LossBreakdown, ModelGrads), ToyError> {
    let caches = data
        .items
        .iter()
        .map(|it| forward_item(model, &it.patches, &data.region_map))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = loss_batch(model, data, &caches, weights);
    let out = total_loss(&batch)?;
    let mut g = ModelGrads::zeros(model);
    g.t_real = out.grads.t_real.clone().expect("text present");
    g.t_fake = out.grads.t_fake.clone().expect("text present");
    for ((it, cache), fg) in data.items.iter().zip(&caches).zip(&out.grads.features) {
        let fg = fg.as_ref().expect("feature item");
        let mut go = Vec::with_capacity(cache.out.len());
        go.push(fg.cls.clone());
        go.extend(fg.patches.iter().cloned());
        backward_item(model, &it.patches, &data.region_map, cache, &go, &mut g);
    }
    Ok((out.breakdown, g))
}

fn step_params(dst: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in dst.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn step_affine(dst: &mut Affine, grad: &Affine, lr: f64) {
    step_params(&mut dst.weight, &grad.weight, lr);
    step_params(&mut dst.bias, &grad.bias, lr);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder, text embeddings and shared key.
    Backbone,
    /// Region experts only.
    Experts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAuc {
    pub domain: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub intra: Vec<DomainAuc>,
    pub summary: CrossAucSummary,
    pub matrix: CrossAucMatrix,
}

impl Evaluation {
    /// |mean intra AUC - cross_avg|.
    pub fn gap(&self) -> f64 {
        let intra = self.intra.iter().map(|d| d.auc).sum::<f64>() / self.intra.len() as f64;
        (intra - self.summary.cross_avg).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ToyConfig,
    pub seed: u64,
    pub ranked: RankedScore,
    pub trajectory: Vec<StepRecord>,
    pub final_intra: Vec<DomainAuc>,
    pub summary: CrossAucSummary,
}

/// Plain gradient descent on `data`. The last `config.stage2_steps()` steps switch
/// FaRMoE on and train only the experts; everything else is frozen there.
pub fn train(config: &ToyConfig, model: &mut ToyModel, data: &SyntheticFaceBatch) -> Result<Vec<StepRecord>, ToyError> {
    config.validate()?;
    let stage1 = config.steps - config.stage2_steps();
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let stage = if step < stage1 { Stage::Backbone } else { Stage::Experts };
        if stage == Stage::Experts && !model.moe_active {
            model.activate_moe();
        }
        let (loss, g) = match loss_and_grads(model, data, config.weights) {
            Ok(v) => v,
            Err(ToyError::Loss(LossError::ZeroNormVector(_))) => {
                return Err(ToyError::DivergenceDetected { step, value: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        if !loss.l_total.is_finite() {
            return Err(ToyError::DivergenceDetected {
                step,
                value: loss.l_total,
            });
        }
        let lr = config.learning_rate;
        match stage {
            Stage::Backbone => {
                step_params(&mut model.encoder, &g.encoder, lr);
                step_params(&mut model.encoder_bias, &g.encoder_bias, lr);
                step_params(&mut model.text.t_real, &g.t_real, lr);
                step_params(&mut model.text.t_fake, &g.t_fake, lr);
                step_affine(&mut model.bank.shared_key, &g.shared_key, lr);
            }
            Stage::Experts => {
                for (e, ge) in model.bank.experts.iter_mut().zip(&g.experts) {
                    step_affine(e, ge, lr);
                }
            }
        }
        trajectory.push(StepRecord { step, stage, loss });
    }
    Ok(trajectory)
}

/// Scores every item with its global probability and runs the Cross-AUC matrix.
pub fn evaluate(model: &ToyModel, data: &SyntheticFaceBatch) -> Result<Evaluation, ToyError> {
    let outputs = forward(model, data)?;
    let samples: Vec<Sample> = data
        .items
        .iter()
        .zip(&outputs)
        .map(|(it, o)| Sample {
            sample_id: it.id.clone(),
            dataset_id: it.domain.clone(),
            video_id: it.id.clone(),
            frame_idx: 0,
            label: if it.label == 1 { Label::Fake } else { Label::Real },
            score: o.global_p,
        })
        .collect();
    let store = ScoreStore::from_samples(samples).map_err(|e| ToyError::InvalidSpec(e.to_string()))?;
    let matrix = cross_matrix(&store, Level::Frame, VideoAggregation::Mean)?;
    let summary = summarize(&matrix)?;
    let intra = store
        .dataset_ids()
        .into_iter()
        .map(|ds| {
            intra_auc(&store, ds, Level::Frame, VideoAggregation::Mean)
                .map(|r| DomainAuc {
                    domain: ds.to_string(),
                    auc: r.value,
                })
                .map_err(|e| ToyError::CrossAuc(e.into()))
        })
        .collect::<Result<_, _>>()?;
    Ok(Evaluation { intra, summary, matrix })
}

/// Seeds for the training draw, the held-out draw and the model initialization.
fn sub_seed(seed: u64, what: &str) -> u64 {
    domain_seed(seed, what)
}

/// Training data, evaluation data and the initial model for `config`.
pub fn prepare(config: &ToyConfig) -> Result<(SyntheticFaceBatch, SyntheticFaceBatch, ToyModel), ToyError> {
    config.validate()?;
    let spec = DataSpec {
        seed: config.seed,
        ..config.data.clone()
    };
    let train_all = gen_synthetic_batch(&spec, &mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "train")))?;
    let train_data = train_all.restrict(&config.train_domains);
    let eval_spec = DataSpec {
        n_pairs: config.eval_pairs,
        ..spec
    };
    let eval_data = gen_synthetic_batch(&eval_spec, &mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "eval")))?;
    let model = ToyModel::init(
        config.dim,
        spec.input_dim,
        train_data.region_map.k_regions,
        &mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "model")),
    );
    Ok((train_data, eval_data, model))
}

/// Generates data from the config's seed, trains and evaluates.
pub fn run(config: &ToyConfig) -> Result<(TrainReport, ToyModel), ToyError> {
    let (train_data, eval_data, mut model) = prepare(config)?;
    let trajectory = train(config, &mut model, &train_data)?;
    let ev = evaluate(&model, &eval_data)?;
    Ok((
        TrainReport {
            config: config.clone(),
            seed: config.seed,
            ranked: RankedScore::Probability,
            trajectory,
            final_intra: ev.intra,
            summary: ev.summary,
        },
        model,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub seeds: Vec<u64>,
    pub intra_avg: f64,
    pub cross_avg: f64,
    pub cross_min: f64,
}

/// Mean intra and Cross-AUC over `seeds` for every (lambda1, lambda2).
pub fn lambda_sweep(base: &ToyConfig, grid: &[(f64, f64)], seeds: &[u64]) -> Result<Vec<SweepRow>, ToyError> {
    grid.iter()
        .map(|&(l1, l2)| {
            let (mut intra, mut cross, mut cmin) = (0.0, 0.0, 0.0);
            for &seed in seeds {
                let cfg = ToyConfig {
                    seed,
                    weights: LossWeights {
                        lambda1: l1,
                        lambda2: l2,
                        ..base.weights
                    },
                    ..base.clone()
                };
                let (report, _) = run(&cfg)?;
                intra += report.final_intra.iter().map(|d| d.auc).sum::<f64>() / report.final_intra.len() as f64;
                cross += report.summary.cross_avg;
                cmin += report.summary.cross_min;
            }
            let n = seeds.len() as f64;
            Ok(SweepRow {
                lambda1: l1,
                lambda2: l2,
                seeds: seeds.to_vec(),
                intra_avg: intra / n,
                cross_avg: cross / n,
                cross_min: cmin / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DataSpec {
        DataSpec {
            input_dim: 3,
            grid_h: 2,
            grid_w: 2,
            patch_px: 16,
            n_pairs: 2,
            ..DataSpec::default()
        }
    }

    fn tiny_model(seed: u64, data: &SyntheticFaceBatch) -> ToyModel {
        let mut m = ToyModel::init(4, 3, data.region_map.k_regions, &mut ChaCha8Rng::seed_from_u64(seed));
        // larger keys so attention is far from uniform
        m.bank.shared_key.weight.iter_mut().for_each(|w| *w *= 10.0);
        m.encoder_bias = vec![0.3, -0.2, 0.1, 0.5];
        m
    }

    fn params(m: &ToyModel) -> Vec<f64> {
        let mut v = m.encoder.clone();
        v.extend(&m.encoder_bias);
        v.extend(&m.text.t_real);
        v.extend(&m.text.t_fake);
        v.extend(&m.bank.shared_key.weight);
        v.extend(&m.bank.shared_key.bias);
        for e in &m.bank.experts {
            v.extend(&e.weight);
            v.extend(&e.bias);
        }
        v
    }

    fn set_params(m: &mut ToyModel, v: &[f64]) {
        let mut it = v.iter().copied();
        let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|x| *x = it.next().unwrap());
        fill(&mut m.encoder);
        fill(&mut m.encoder_bias);
        fill(&mut m.text.t_real);
        fill(&mut m.text.t_fake);
        fill(&mut m.bank.shared_key.weight);
        fill(&mut m.bank.shared_key.bias);
        for e in &mut m.bank.experts {
            fill(&mut e.weight);
            fill(&mut e.bias);
        }
    }

    fn grad_vec(g: &ModelGrads) -> Vec<f64> {
        let mut v = g.encoder.clone();
        v.extend(&g.encoder_bias);
        v.extend(&g.t_real);
        v.extend(&g.t_fake);
        v.extend(&g.shared_key.weight);
        v.extend(&g.shared_key.bias);
        for e in &g.experts {
            v.extend(&e.weight);
            v.extend(&e.bias);
        }
        v
    }

    fn check_fd(model: &ToyModel, data: &SyntheticFaceBatch) {
        let w = LossWeights::default();
        let (_, g) = loss_and_grads(model, data, w).unwrap();
        let analytic = grad_vec(&g);
        let base = params(model);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut m = model.clone();
            let mut v = base.clone();
            v[i] += h;
            set_params(&mut m, &v);
            let up = loss_and_grads(&m, data, w).unwrap().0.l_total;
            v[i] -= 2.0 * h;
            set_params(&mut m, &v);
            let dn = loss_and_grads(&m, data, w).unwrap().0.l_total;
            let num = (up - dn) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let data = gen_synthetic_batch(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for seed in 0..3 {
            let mut m = tiny_model(seed, &data);
            check_fd(&m, &data);
            m.activate_moe();
            for (k, e) in m.bank.experts.iter_mut().enumerate() {
                e.weight.iter_mut().for_each(|w| *w *= 1.0 + 0.1 * k as f64);
            }
            check_fd(&m, &data);
        }
    }

    #[test]
    fn equal_experts_collapse_to_shared_model() {
        let data = gen_synthetic_batch(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let plain = tiny_model(5, &data);
        let mut moe = plain.clone();
        moe.activate_moe();
        let (a, b) = (forward(&plain, &data).unwrap(), forward(&moe, &data).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.global_p - y.global_p).abs() <= 1e-10);
            for (p, q) in x.patch_p.iter().zip(&y.patch_p) {
                assert!((p - q).abs() <= 1e-10);
            }
        }
        let w = LossWeights::default();
        let (_, ga) = loss_and_grads(&plain, &data, w).unwrap();
        let (_, gb) = loss_and_grads(&moe, &data, w).unwrap();
        assert!(ga.encoder.iter().zip(&gb.encoder).all(|(x, y)| (x - y).abs() <= 1e-10));
        // patch-key gradient moves from the shared key to the experts
        let mut summed = gb.shared_key.weight.clone();
        for e in &gb.experts {
            for (s, v) in summed.iter_mut().zip(&e.weight) {
                *s += v;
            }
        }
        assert!(ga.shared_key.weight.iter().zip(&summed).all(|(x, y)| (x - y).abs() <= 1e-10));
    }

    /// Straight-line forward pass for one item, written without the cache machinery.
    fn reference_forward(m: &ToyModel, x: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let d = m.dim;
        let n_in = m.input_dim;
        let mut tokens = vec![vec![0.0; d]];
        for xi in x {
            let mut h = vec![0.0; d];
            for r in 0..d {
                h[r] = m.encoder_bias[r];
                for c in 0..n_in {
                    h[r] += m.encoder[r * n_in + c] * xi[c];
                }
            }
            for r in 0..d {
                tokens[0][r] += h[r] / x.len() as f64;
            }
            tokens.push(h);
        }
        let w = &m.bank.shared_key;
        let mut keys = Vec::new();
        for t in &tokens {
            let mut k = vec![0.0; d];
            for r in 0..d {
                k[r] = w.bias[r];
                for c in 0..d {
                    k[r] += w.weight[r * d + c] * t[c];
                }
            }
            keys.push(k);
        }
        let mut probs = Vec::new();
        for q in &tokens {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut o = q.clone();
            for (j, t) in tokens.iter().enumerate() {
                for r in 0..d {
                    o[r] += e[j] / s * t[r];
                }
            }
            let cos = |a: &[f64], b: &[f64]| {
                let dp: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dp / (na * nb)
            };
            let diff = cos(&o, &m.text.t_fake) - cos(&o, &m.text.t_real);
            probs.push(1.0 / (1.0 + (-diff).exp()));
        }
        (probs[0], probs[1..].to_vec())
    }

    #[test]
    fn forward_matches_reference() {
        let data = gen_synthetic_batch(&tiny_spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let m = tiny_model(7, &data);
        let out = forward(&m, &data).unwrap();
        for (it, o) in data.items.iter().zip(&out) {
            let (g, p) = reference_forward(&m, &it.patches);
            assert!((g - o.global_p).abs() < 1e-12);
            for (a, b) in p.iter().zip(&o.patch_p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_scores_half_everywhere() {
        let spec = DataSpec {
            n_pairs: 10,
            ..DataSpec::default()
        };
        let data = gen_synthetic_batch(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let m = ToyModel::zeros(8, spec.input_dim, data.region_map.k_regions);
        for o in forward(&m, &data).unwrap() {
            assert_eq!(o.global_p, 0.5);
            assert!(o.patch_p.iter().all(|&p| p == 0.5));
        }
        let ev = evaluate(&m, &data).unwrap();
        assert!(ev.matrix.cross_values().iter().all(|&v| v == 0.5));
        assert!(ev.intra.iter().all(|d| d.auc == 0.5));
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let spec = DataSpec::default();
        let a = gen_synthetic_batch(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_synthetic_batch(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for it in &a.items {
            if it.label == 1 {
                let ones = it.patch_labels.labels.iter().filter(|&&l| l == 1).count();
                assert!(ones >= 1 && ones < spec.n_patches());
                let real = &a.items[it.paired_real.unwrap()];
                assert_eq!(real.label, 0);
                assert_eq!(real.domain, it.domain);
            }
        }
        assert!(gen_synthetic_batch(&DataSpec { n_pairs: 0, ..spec }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_nuisance_domains_share_a_distribution() {
        let spec = DataSpec {
            nuisance: 0.0,
            n_pairs: 400,
            ..DataSpec::default()
        };
        let data = gen_synthetic_batch(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mean = |dom: &str, label: u8, axis: usize| {
            let v: Vec<f64> = data
                .domain_items(dom)
                .filter(|(_, it)| it.label == label)
                .flat_map(|(_, it)| it.patches.iter().map(move |p| p[axis]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        for label in [0, 1] {
            for axis in 0..spec.input_dim {
                // 6400 unit-variance draws per mean: 5 sigma is about 0.09
                assert!((mean("D0", label, axis) - mean("D1", label, axis)).abs() < 0.09);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_flat() {
        let cfg = ToyConfig {
            steps: 5,
            learning_rate: 0.0,
            data: DataSpec {
                n_pairs: 8,
                ..DataSpec::default()
            },
            eval_pairs: 8,
            ..ToyConfig::default()
        };
        let (report, _) = run(&cfg).unwrap();
        let first = report.trajectory[0].loss.l_total;
        assert!(report.trajectory.iter().all(|s| s.loss.l_total == first));
        assert_eq!(report.trajectory.len(), 5);
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let cfg = ToyConfig {
            steps: 5,
            learning_rate: 1e306,
            data: DataSpec {
                n_pairs: 4,
                ..DataSpec::default()
            },
            eval_pairs: 4,
            ..ToyConfig::default()
        };
        match run(&cfg) {
            Err(ToyError::DivergenceDetected { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.0.summary)),
        }
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let mut lr = 0.5;
        loop {
            let cfg = ToyConfig {
                steps: 10,
                learning_rate: lr,
                data: DataSpec {
                    n_pairs: 16,
                    ..DataSpec::default()
                },
                eval_pairs: 4,
                ..ToyConfig::default()
            };
            let (report, _) = run(&cfg).unwrap();
            let l: Vec<f64> = report.trajectory.iter().map(|s| s.loss.l_total).collect();
            if l.windows(2).all(|w| w[1] <= w[0]) {
                break;
            }
            lr /= 2.0;
            assert!(lr > 1e-4, "no step size gave a monotone start: {l:?}");
        }
    }

    #[test]
    fn stage_two_trains_only_experts() {
        let cfg = ToyConfig {
            steps: 6,
            moe_steps: 3,
            use_farmoe: true,
            data: DataSpec {
                n_pairs: 4,
                ..DataSpec::default()
            },
            eval_pairs: 4,
            ..ToyConfig::default()
        };
        let (train_data, _, mut model) = prepare(&cfg).unwrap();
        let stage1 = ToyConfig {
            steps: 3,
            use_farmoe: false,
            ..cfg.clone()
        };
        train(&stage1, &mut model, &train_data).unwrap();
        let frozen = model.clone();
        let mut full = prepare(&cfg).unwrap().2;
        let traj = train(&cfg, &mut full, &train_data).unwrap();
        assert_eq!(traj.iter().filter(|s| s.stage == Stage::Experts).count(), 3);
        assert_eq!(full.encoder, frozen.encoder);
        assert_eq!(full.text, frozen.text);
        assert_eq!(full.bank.shared_key, frozen.bank.shared_key);
        assert!(full.moe_active);
        assert!(full.bank.experts.iter().any(|e| *e != frozen.bank.shared_key));
    }

    #[test]
    fn default_config_learns_the_planted_task() {
        let (report, _) = run(&ToyConfig::default()).unwrap();
        let t = &report.trajectory;
        assert_eq!(t.len(), 400);
        assert!(t.last().unwrap().loss.l_total < t[0].loss.l_total);
        for d in &report.final_intra {
            assert!(d.auc >= 0.95, "{}: {}", d.domain, d.auc);
        }
    }

    #[test]
    fn null_signal_gives_chance_auc() {
        let cfg = ToyConfig {
            steps: 100,
            eval_pairs: 2000,
            data: DataSpec {
                signal: 0.0,
                artifact: 0.0,
                ..DataSpec::default()
            },
            ..ToyConfig::default()
        };
        let (report, _) = run(&cfg).unwrap();
        for d in &report.final_intra {
            assert!((d.auc - 0.5).abs() <= 0.05, "{}: {}", d.domain, d.auc);
        }
    }

    #[test]
    fn clean_separation_without_nuisance_is_perfect() {
        let cfg = ToyConfig {
            data: DataSpec {
                nuisance: 0.0,
                noise: 0.05,
                ..DataSpec::default()
            },
            ..ToyConfig::default()
        };
        let (report, _) = run(&cfg).unwrap();
        assert_eq!(report.summary.cross_avg, 1.0);
        assert!(report.final_intra.iter().all(|d| d.auc == 1.0));
    }

    #[test]
    fn zero_steps_give_an_empty_trajectory() {
        let cfg = ToyConfig {
            steps: 0,
            moe_steps: 0,
            eval_pairs: 8,
            ..ToyConfig::default()
        };
        let (report, _) = run(&cfg).unwrap();
        assert!(report.trajectory.is_empty());
        assert_eq!(report.final_intra.len(), 2);
    }

    #[test]
    fn train_and_evaluate_are_bit_reproducible() {
        let cfg = ToyConfig {
            steps: 30,
            moe_steps: 10,
            use_farmoe: true,
            seed: 11,
            ..ToyConfig::default()
        };
        let (a, ma) = run(&cfg).unwrap();
        let (b, mb) = run(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(ma.to_json(), mb.to_json());
    }
}
