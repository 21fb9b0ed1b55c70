use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crossauc_core::score_store::Label;
use crossauc_core::shift_sim::{shift_scenario_samples, shifted_id, DomainSpec, Histogram, SimError};

use crate::output::{emit_report, emit_text, read_text, CliError, CmdResult, RunManifest, EXIT_OK};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Base domain spec (JSON).
    pub spec: PathBuf,
    /// Comma-separated additive shifts, one derived domain each.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0")]
    pub shifts: Vec<f64>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL score output.
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram report path; stdout when omitted.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Histogram range as lo,hi; defaults to the span of all scores.
    #[arg(long, value_delimiter = ',', num_args = 2, allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SimulateConfig<'a> {
    spec: &'a DomainSpec,
    shifts: &'a [f64],
    bins: usize,
    range: (f64, f64),
    out: String,
}

#[derive(Serialize)]
struct DomainRow {
    dataset_id: String,
    shift: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    planted_auc: f64,
    domains: Vec<DomainRow>,
    n_samples: usize,
    histograms: Vec<Histogram>,
}

fn sim_error(e: SimError) -> CliError {
    CliError::input(e.to_string())
}

pub fn run(args: &SimulateArgs) -> CmdResult {
    let (text, digest) = read_text(&args.spec)?;
    let mut spec: DomainSpec =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", args.spec.display())))?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let samples = shift_scenario_samples(&spec, &args.shifts).map_err(sim_error)?;

    let range = match &args.range {
        Some(r) => (r[0], r[1]),
        None => {
            let lo = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
            let hi = samples.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo, lo + 1.0)
            }
        }
    };
    let mut histograms = Vec::with_capacity(args.shifts.len());
    let mut domains = Vec::with_capacity(args.shifts.len());
    for (k, &shift) in args.shifts.iter().enumerate() {
        let id = shifted_id(&spec.dataset_id, k);
        let of = |label| {
            samples
                .iter()
                .filter(|s| s.dataset_id == id && s.label == label)
                .map(|s| s.score)
                .collect::<Vec<_>>()
        };
        histograms.push(Histogram::build(&id, &of(Label::Real), &of(Label::Fake), args.bins, range).map_err(sim_error)?);
        domains.push(DomainRow { dataset_id: id, shift });
    }

    let mut jsonl = String::new();
    for s in &samples {
        jsonl.push_str(&s.to_json_line());
        jsonl.push('\n');
    }
    emit_text(Some(&args.out), &jsonl)?;

    let config = SimulateConfig {
        spec: &spec,
        shifts: &args.shifts,
        bins: args.bins,
        range,
        out: args.out.display().to_string(),
    };
    let manifest = RunManifest::new("simulate", Some(spec.seed), &config).with_inputs(vec![digest]);
    let report = SimulateReport {
        planted_auc: spec.planted_auc(),
        domains,
        n_samples: samples.len(),
        histograms,
    };
    emit_report(args.hist.as_ref(), &manifest, &report)?;
    Ok(EXIT_OK)
}
