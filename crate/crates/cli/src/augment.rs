use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crossauc_core::augmentation::{
    downsample_mask, sample_augmentation, AugmentConfig, AugmentMeta, ImageBuffer, LandmarkSet,
    PatchLabels, Region, DEFAULT_TAU,
};

use crate::output::{emit_bytes, emit_report, read_input, read_text, CliError, CmdResult, InputDigest, RunManifest, EXIT_OK};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    /// Paste fake pixels into the real image inside the region mask.
    Swap,
    /// Blend a transformed copy of the real image through a smoothed mask.
    SelfBlend,
    /// Swap with probability one half, self-blend otherwise.
    Random,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Real image, binary PPM (P6) or PGM (P5).
    #[arg(long)]
    pub real: PathBuf,
    /// Fake image of the same shape; needed unless the mode is self-blend.
    #[arg(long)]
    pub fake: Option<PathBuf>,
    /// 68 (x, y) landmark points as a JSON array of pairs.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Random)]
    pub mode: ModeArg,
    /// Comma-separated candidate regions (left_eye, right_eye, nose, mouth,
    /// left_half, right_half); all six when omitted.
    #[arg(long)]
    pub regions: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch side for the label grid.
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// A patch is forged when its mask coverage is strictly above this.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Self-blend smoothing width; scaled to the image when omitted.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Soft-mask level that counts as forged for self-blend.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out_image: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
    /// Label report path; stdout when omitted.
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
}

#[derive(Serialize)]
struct AugmentRunConfig {
    mode: ModeArg,
    augment: AugmentConfig,
    seed: u64,
    patch: usize,
    tau: f64,
}

#[derive(Serialize)]
struct AugmentReport {
    height: usize,
    width: usize,
    channels: usize,
    mask_pixels: usize,
    meta: AugmentMeta,
    patch_labels: PatchLabels,
}

fn parse_regions(s: &str) -> Result<Vec<Region>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Region>().map_err(|e| CliError::input(e.to_string())))
        .collect()
}

fn load_image(path: &PathBuf) -> Result<(ImageBuffer, InputDigest), CliError> {
    let (bytes, digest) = read_input(path)?;
    let img = ImageBuffer::from_pnm(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok((img, digest))
}

pub fn run(args: &AugmentArgs) -> CmdResult {
    let (real, real_digest) = load_image(&args.real)?;
    let mut inputs = vec![real_digest];
    let fake = match (&args.fake, args.mode) {
        (Some(p), _) => {
            let (img, d) = load_image(p)?;
            inputs.push(d);
            img
        }
        (None, ModeArg::SelfBlend) => real.clone(),
        (None, _) => return Err(CliError::input("--fake is required unless --mode self-blend")),
    };
    if real.shape() != fake.shape() {
        return Err(CliError::input(format!(
            "shape mismatch: real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (lm_text, lm_digest) = read_text(&args.landmarks)?;
    inputs.push(lm_digest);
    let landmarks =
        LandmarkSet::from_json(&lm_text).map_err(|e| CliError::input(format!("{}: {e}", args.landmarks.display())))?;

    let config = AugmentConfig {
        p_swap: match args.mode {
            ModeArg::Swap => 1.0,
            ModeArg::SelfBlend => 0.0,
            ModeArg::Random => 0.5,
        },
        sigma: args.sigma,
        regions: args.regions.as_deref().map(parse_regions).transpose()?,
        threshold: args.threshold,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let aug = sample_augmentation(&real, &fake, &landmarks, &config, &mut rng)
        .map_err(|e| CliError::input(e.to_string()))?;
    let labels = downsample_mask(&aug.mask, args.patch, args.tau).map_err(|e| CliError::input(e.to_string()))?;

    emit_bytes(Some(&args.out_image), &aug.image.to_pnm())?;
    emit_bytes(Some(&args.out_mask), &aug.mask.to_pgm())?;
    let run_config = AugmentRunConfig {
        mode: args.mode,
        augment: config,
        seed: args.seed,
        patch: args.patch,
        tau: args.tau,
    };
    let manifest = RunManifest::new("augment", Some(args.seed), &run_config).with_inputs(inputs);
    let (height, width, channels) = aug.image.shape();
    let report = AugmentReport {
        height,
        width,
        channels,
        mask_pixels: aug.mask.count_ones(),
        meta: aug.meta,
        patch_labels: labels,
    };
    emit_report(args.out_labels.as_ref(), &manifest, &report)?;
    Ok(EXIT_OK)
}
