use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crossauc_core::toy_trainer::{lambda_sweep, run as run_toy, SweepRow, ToyConfig, ToyError};

use crate::output::{emit_bytes, emit_report, read_text, CliError, CmdResult, InputDigest, RunManifest, EXIT_OK};

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// Config document (JSON); omitted fields take their defaults.
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the trained model as flat JSON.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn toy_error(e: ToyError) -> CliError {
    match e {
        ToyError::InvalidConfig(_) | ToyError::InvalidSpec(_) | ToyError::DimMismatch(_) => CliError::input(e.to_string()),
        other => CliError::numeric(other.to_string()),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<(ToyConfig, Vec<InputDigest>), CliError> {
    match path {
        None => Ok((ToyConfig::default(), Vec::new())),
        Some(p) => {
            let (text, digest) = read_text(p)?;
            let cfg: ToyConfig =
                serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            Ok((cfg, vec![digest]))
        }
    }
}

pub fn run_train(args: &ToyArgs) -> CmdResult {
    let (mut config, inputs) = load_config(args.config.as_ref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(s) = args.steps {
        config.steps = s;
        config.moe_steps = config.moe_steps.min(s);
    }
    config.validate().map_err(toy_error)?;
    let manifest = RunManifest::new("toytrain", Some(config.seed), &config).with_inputs(inputs);
    let (report, model) = run_toy(&config).map_err(toy_error)?;
    emit_report(args.out.as_ref(), &manifest, &report)?;
    if let Some(p) = &args.checkpoint {
        emit_bytes(Some(p), model.to_json().as_bytes())?;
    }
    Ok(EXIT_OK)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Base config document (JSON); its weights' margin is kept.
    pub config: Option<PathBuf>,
    /// Comma-separated lambda1:lambda2 points.
    #[arg(long, default_value = "0:0,0:0.2,0.3:0,0.3:0.2")]
    pub grid: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepConfig<'a> {
    base: &'a ToyConfig,
    grid: &'a [(f64, f64)],
    seeds: &'a [u64],
}

#[derive(Serialize)]
struct SweepReport {
    rows: Vec<SweepRow>,
}

fn parse_grid(s: &str) -> Result<Vec<(f64, f64)>, CliError> {
    s.split(',')
        .map(|pt| {
            let (a, b) = pt
                .split_once(':')
                .ok_or_else(|| CliError::input(format!("grid point {pt:?} is not lambda1:lambda2")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::input(format!("bad number {v:?} in grid")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| CliError::input(format!("bad seed {v:?}"))))
        .collect()
}

pub fn run_sweep(args: &SweepArgs) -> CmdResult {
    let (base, inputs) = load_config(args.config.as_ref())?;
    base.validate().map_err(toy_error)?;
    let grid = parse_grid(&args.grid)?;
    let seeds = parse_seeds(&args.seeds)?;
    let manifest = RunManifest::new(
        "sweep",
        None,
        &SweepConfig {
            base: &base,
            grid: &grid,
            seeds: &seeds,
        },
    )
    .with_inputs(inputs);

    // One thread per grid point; rows are collected back in grid order.
    let results: Vec<Result<Vec<SweepRow>, ToyError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&pt| {
                let (base, seeds) = (&base, &seeds);
                scope.spawn(move || lambda_sweep(base, &[pt], seeds))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(grid.len());
    for r in results {
        rows.extend(r.map_err(toy_error)?);
    }
    emit_report(args.out.as_ref(), &manifest, &SweepReport { rows })?;
    Ok(EXIT_OK)
}
