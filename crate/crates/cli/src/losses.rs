use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use crossauc_core::alignment_losses::{grad_check, total_loss, Batch, GradCheck, LossBreakdown, LossError, LossWeights, RankedScore};

use crate::output::{emit_report, read_text, CliError, CmdResult, RunManifest, EXIT_NUMERIC, EXIT_OK};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RankedArg {
    Probability,
    Similarity,
    Difference,
}

#[derive(Args, Debug)]
pub struct LossesArgs {
    /// Batch document (JSON).
    pub batch: PathBuf,
    /// Overrides the batch's lambda1.
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Overrides which per-patch quantity the ranking terms compare.
    #[arg(long, value_enum)]
    pub ranked: Option<RankedArg>,
    /// Compare analytic gradients with central finite differences.
    #[arg(long)]
    pub grad_check: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative gradient error.
    #[arg(long, default_value_t = 1e-5)]
    pub max_rel_err: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LossesConfig {
    weights: LossWeights,
    ranked: RankedScore,
    grad_check: bool,
    step: f64,
    max_rel_err: f64,
}

#[derive(Serialize)]
struct GradCheckReport {
    #[serde(flatten)]
    check: GradCheck,
    /// The six-decimal float fields hide errors this small.
    max_rel_err_sci: String,
    max_rel_err_allowed: f64,
    pass: bool,
}

#[derive(Serialize)]
struct LossesReport {
    breakdown: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_check: Option<GradCheckReport>,
}

fn loss_error(e: LossError) -> CliError {
    match e {
        LossError::ZeroNormVector(_) => CliError::numeric(e.to_string()),
        other => CliError::input(other.to_string()),
    }
}

pub fn run(args: &LossesArgs) -> CmdResult {
    let (text, digest) = read_text(&args.batch)?;
    let mut batch = Batch::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", args.batch.display())))?;
    if let Some(v) = args.lambda1 {
        batch.weights.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        batch.weights.lambda2 = v;
    }
    if let Some(v) = args.margin {
        batch.weights.margin = v;
    }
    if let Some(r) = args.ranked {
        batch.ranked = match r {
            RankedArg::Probability => RankedScore::Probability,
            RankedArg::Similarity => RankedScore::Similarity,
            RankedArg::Difference => RankedScore::Difference,
        };
    }
    batch.validate().map_err(loss_error)?;
    if args.grad_check && !(args.step.is_finite() && args.step > 0.0) {
        return Err(CliError::input(format!("step {} must be > 0", args.step)));
    }

    let breakdown = total_loss(&batch).map_err(loss_error)?.breakdown;
    let check = if args.grad_check {
        let check = grad_check(&batch, args.step).map_err(loss_error)?;
        let pass = check.max_rel_err < args.max_rel_err;
        eprintln!(
            "grad check: {} coordinates, max relative error {:.3e} ({})",
            check.n_coords,
            check.max_rel_err,
            if pass { "pass" } else { "FAIL" }
        );
        Some(GradCheckReport {
            max_rel_err_sci: format!("{:.3e}", check.max_rel_err),
            check,
            max_rel_err_allowed: args.max_rel_err,
            pass,
        })
    } else {
        None
    };

    let config = LossesConfig {
        weights: batch.weights,
        ranked: batch.ranked,
        grad_check: args.grad_check,
        step: args.step,
        max_rel_err: args.max_rel_err,
    };
    let manifest = RunManifest::new("losses", None, &config).with_inputs(vec![digest]);
    let failed = check.as_ref().is_some_and(|c| !c.pass);
    emit_report(
        args.out.as_ref(),
        &manifest,
        &LossesReport {
            breakdown,
            grad_check: check,
        },
    )?;
    Ok(if failed { EXIT_NUMERIC } else { EXIT_OK })
}
