//! Mask-guided hybrid augmentation: landmark region masks, real/fake blending,
//! self-blending through a smoothed mask, and patch-label downsampling.

pub mod image;
pub mod landmarks;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{BinaryMask, ImageBuffer, ImageError, PatchLabels, SoftMask};
pub use landmarks::{LandmarkError, LandmarkSet, Region};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("region set is empty")]
    EmptyRegionSet,
    #[error(transparent)]
    OutOfBoundsLandmarks(#[from] LandmarkError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma must be finite and > 0, got {0}")]
    InvalidSigma(f64),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("{height}x{width} is not divisible by patch size {patch}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("tau must lie in [0, 1), got {0}")]
    InvalidTau(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Union of the rasterized convex hulls of the chosen regions.
pub fn region_mask(
    landmarks: &LandmarkSet,
    regions: &[Region],
    height: usize,
    width: usize,
) -> Result<BinaryMask, AugmentError> {
    if regions.is_empty() {
        return Err(AugmentError::EmptyRegionSet);
    }
    landmarks.check_bounds(height, width)?;
    let mut bits = vec![false; height * width];
    for &r in regions {
        for (b, v) in bits
            .iter_mut()
            .zip(landmarks::rasterize_region(landmarks, r, height, width))
        {
            *b |= v;
        }
    }
    Ok(BinaryMask::from_bools(height, width, &bits))
}

fn check_mask_shape(img: &ImageBuffer, h: usize, w: usize) -> Result<(), AugmentError> {
    if img.height() != h || img.width() != w {
        return Err(AugmentError::ShapeMismatch(format!(
            "image is {}x{}, mask is {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Takes fake pixels where the mask is 1 and real pixels elsewhere.
pub fn blend_swap(
    real: &ImageBuffer,
    fake: &ImageBuffer,
    mask: &BinaryMask,
) -> Result<ImageBuffer, AugmentError> {
    if real.shape() != fake.shape() {
        return Err(AugmentError::ShapeMismatch(format!(
            "real is {:?}, fake is {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    check_mask_shape(real, mask.height(), mask.width())?;
    let c = real.channels();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| if mask.data()[i / c] == 1 { f } else { r })
        .collect();
    Ok(ImageBuffer::from_parts_unchecked(
        real.height(),
        real.width(),
        c,
        data,
    ))
}

/// Default blur width, scaled from sigma 5 on a 224-pixel canvas.
pub fn default_sigma(height: usize, width: usize) -> f64 {
    5.0 * height.min(width) as f64 / 224.0
}

/// Normalized discrete Gaussian taps on `-r..=r` with `r = ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Symmetric reflection (edge pixel repeated) into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflective borders.
pub fn smooth_mask(mask: &BinaryMask, sigma: f64) -> Result<SoftMask, AugmentError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(AugmentError::InvalidSigma(sigma));
    }
    let (h, w) = (mask.height(), mask.width());
    if h == 0 || w == 0 {
        return Ok(SoftMask::filled(h, w, 0.0).expect("empty"));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            tmp[row * w + col] = k
                .iter()
                .enumerate()
                .map(|(t, &wt)| wt * src[row * w + reflect_index(col as i64 + t as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(t, &wt)| wt * tmp[reflect_index(row as i64 + t as i64 - r, h) * w + col])
                .sum();
            out[row * w + col] = v.clamp(0.0, 1.0);
        }
    }
    Ok(SoftMask::new(h, w, out).expect("values clamped"))
}

/// Per-channel colour jitter plus an optional 2x down-up resample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub resample: bool,
}

impl TransformParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
            resample: false,
        }
    }

    /// Gain in [0.9, 1.1], bias in [-0.05, 0.05], resample with probability 1/2.
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let gain = (0..channels).map(|_| rng.random_range(0.9..=1.1)).collect();
        let bias = (0..channels).map(|_| rng.random_range(-0.05..=0.05)).collect();
        Self {
            gain,
            bias,
            resample: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.resample && self.gain.iter().all(|&g| g == 1.0) && self.bias.iter().all(|&b| b == 0.0)
    }

    fn validate(&self, channels: usize) -> Result<(), AugmentError> {
        if self.gain.len() != channels || self.bias.len() != channels {
            return Err(AugmentError::InvalidTransform(format!(
                "expected {channels} gains and biases, got {} and {}",
                self.gain.len(),
                self.bias.len()
            )));
        }
        if self.gain.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(AugmentError::InvalidTransform("non-finite parameter".into()));
        }
        if self.gain.iter().any(|&g| g < 0.0) {
            return Err(AugmentError::InvalidTransform("negative gain".into()));
        }
        Ok(())
    }

    /// T(img), clamped to [0, 1]. Size is preserved.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, AugmentError> {
        let (h, w, c) = img.shape();
        self.validate(c)?;
        let base = if self.resample {
            down_up(img)
        } else {
            img.data().to_vec()
        };
        let data = base
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.gain[i % c] * v + self.bias[i % c]).clamp(0.0, 1.0))
            .collect();
        Ok(ImageBuffer::from_parts_unchecked(h, w, c, data))
    }
}

/// Averages 2x2 blocks and writes each average back over its block. A trailing
/// odd row or column averages over the pixels it has.
fn down_up(img: &ImageBuffer) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    for br in (0..h).step_by(2) {
        for bc in (0..w).step_by(2) {
            let rows = br..(br + 2).min(h);
            let cols = bc..(bc + 2).min(w);
            let n = (rows.len() * cols.len()) as f64;
            for ch in 0..c {
                let mut s = 0.0;
                for r in rows.clone() {
                    for q in cols.clone() {
                        s += img.get(r, q, ch);
                    }
                }
                for r in rows.clone() {
                    for q in cols.clone() {
                        out[(r * w + q) * c + ch] = s / n;
                    }
                }
            }
        }
    }
    out
}

/// `soft * T(real) + (1 - soft) * real`, clamped to [0, 1].
pub fn self_blend(
    real: &ImageBuffer,
    transform: &TransformParams,
    soft: &SoftMask,
) -> Result<ImageBuffer, AugmentError> {
    check_mask_shape(real, soft.height(), soft.width())?;
    let t = transform.apply(real)?;
    if transform.is_identity() {
        return Ok(real.clone());
    }
    let c = real.channels();
    let data = real
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(i, (&r, &tr))| {
            let m = soft.data()[i / c];
            (m * tr + (1.0 - m) * r).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImageBuffer::from_parts_unchecked(
        real.height(),
        real.width(),
        c,
        data,
    ))
}

pub const DEFAULT_TAU: f64 = 0.5;

/// A patch is forged iff the mean of the mask over it is strictly above `tau`.
pub fn downsample_mask(
    mask: &BinaryMask,
    patch: usize,
    tau: f64,
) -> Result<PatchLabels, AugmentError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(AugmentError::InvalidTau(tau));
    }
    let (h, w) = (mask.height(), mask.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(AugmentError::IndivisibleDims {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let area = (patch * patch) as f64;
    let mut labels = Vec::with_capacity(gh * gw);
    for pr in 0..gh {
        for pc in 0..gw {
            let mut ones = 0usize;
            for r in pr * patch..(pr + 1) * patch {
                for c in pc * patch..(pc + 1) * patch {
                    ones += mask.get(r, c) as usize;
                }
            }
            labels.push((ones as f64 / area > tau) as u8);
        }
    }
    Ok(PatchLabels {
        grid_h: gh,
        grid_w: gw,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    BlendSwap,
    SelfBlend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_swap: f64,
    /// Blur width for self-blending; `None` scales the default to the image.
    pub sigma: Option<f64>,
    /// Candidate regions; `None` means all six.
    pub regions: Option<Vec<Region>>,
    /// Soft-mask level above which self-blended pixels count as forged.
    pub threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_swap: 0.5,
            sigma: None,
            regions: None,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentMeta {
    pub mode: AugmentMode,
    pub regions: Vec<Region>,
    pub sigma: Option<f64>,
    pub transform: Option<TransformParams>,
    pub mask_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: ImageBuffer,
    pub mask: BinaryMask,
    pub mode: AugmentMode,
    pub meta: AugmentMeta,
}

/// Draws a uniformly random non-empty subset of `candidates`.
pub fn random_region_subset<R: Rng + ?Sized>(candidates: &[Region], rng: &mut R) -> Vec<Region> {
    let n = candidates.len();
    debug_assert!((1..=16).contains(&n));
    let bits = rng.random_range(1u32..(1 << n));
    (0..n)
        .filter(|i| bits >> i & 1 == 1)
        .map(|i| candidates[i])
        .collect()
}

/// Picks blend-swap with probability `p_swap`, self-blend otherwise, over a random
/// region subset. The returned mask is the one the image was built from; for
/// self-blend it is the soft mask thresholded at `config.threshold`.
pub fn sample_augmentation<R: Rng + ?Sized>(
    real: &ImageBuffer,
    fake: &ImageBuffer,
    landmarks: &LandmarkSet,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Augmented, AugmentError> {
    if !(0.0..=1.0).contains(&config.p_swap) {
        return Err(AugmentError::InvalidConfig(format!("p_swap {}", config.p_swap)));
    }
    if !(0.0..1.0).contains(&config.threshold) {
        return Err(AugmentError::InvalidConfig(format!(
            "threshold {}",
            config.threshold
        )));
    }
    let candidates: Vec<Region> = config.regions.clone().unwrap_or_else(|| Region::ALL.to_vec());
    if candidates.is_empty() {
        return Err(AugmentError::EmptyRegionSet);
    }
    let (h, w) = (real.height(), real.width());
    let swap = rng.random_bool(config.p_swap);
    let regions = random_region_subset(&candidates, rng);
    let hard = region_mask(landmarks, &regions, h, w)?;
    if swap {
        let image = blend_swap(real, fake, &hard)?;
        return Ok(Augmented {
            image,
            mask: hard,
            mode: AugmentMode::BlendSwap,
            meta: AugmentMeta {
                mode: AugmentMode::BlendSwap,
                regions,
                sigma: None,
                transform: None,
                mask_threshold: None,
            },
        });
    }
    let sigma = config.sigma.unwrap_or_else(|| default_sigma(h, w));
    let soft = smooth_mask(&hard, sigma)?;
    let transform = TransformParams::random(real.channels(), rng);
    let image = self_blend(real, &transform, &soft)?;
    Ok(Augmented {
        image,
        mask: soft.threshold(config.threshold),
        mode: AugmentMode::SelfBlend,
        meta: AugmentMeta {
            mode: AugmentMode::SelfBlend,
            regions,
            sigma: Some(sigma),
            transform: Some(transform),
            mask_threshold: Some(config.threshold),
        },
    })
}
