use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use crossauc_core::cross_auc::{cross_matrix, summarize, CrossAucError, CrossAucMatrix, CrossAucSummary};
use crossauc_core::roc_auc::{class_scores, Level};
use crossauc_core::score_store::{StoreBuilder, StoreError, VideoAggregation};

use crate::output::{emit_report, emit_text, fixed6, read_input, CliError, CmdResult, RunManifest, EXIT_OK};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelArg {
    Frame,
    Video,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateArg {
    Mean,
    Max,
    Median,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL score files; all files feed one store.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = LevelArg::Frame)]
    pub level: LevelArg,
    /// Frame-to-video aggregation, used with `--level video`.
    #[arg(long, value_enum, default_value_t = AggregateArg::Mean)]
    pub aggregate: AggregateArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalConfig {
    files: Vec<String>,
    level: LevelArg,
    aggregate: AggregateArg,
    format: FormatArg,
}

#[derive(Serialize)]
struct DatasetRow {
    dataset: String,
    n_real: usize,
    n_fake: usize,
    intra_auc: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    level: LevelArg,
    aggregate: AggregateArg,
    n_samples: usize,
    datasets: Vec<DatasetRow>,
    matrix: CrossAucMatrix,
    summary: CrossAucSummary,
}

fn store_error(e: StoreError) -> CliError {
    CliError::input(e.to_string())
}

fn cross_error(e: CrossAucError) -> CliError {
    match e {
        CrossAucError::TooFewDatasets(_) | CrossAucError::NoCrossCells => CliError::insufficient(e.to_string()),
        CrossAucError::Store(s) => store_error(s),
        other => CliError::input(other.to_string()),
    }
}

pub fn run(args: &EvalArgs) -> CmdResult {
    let level = match args.level {
        LevelArg::Frame => Level::Frame,
        LevelArg::Video => Level::Video,
    };
    let rule = match args.aggregate {
        AggregateArg::Mean => VideoAggregation::Mean,
        AggregateArg::Max => VideoAggregation::Max,
        AggregateArg::Median => VideoAggregation::Median,
    };

    let mut builder = StoreBuilder::default();
    let mut inputs = Vec::new();
    for path in &args.files {
        let (bytes, digest) = read_input(path)?;
        builder
            .ingest(bytes.as_slice(), 0)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        inputs.push(digest);
    }
    let store = builder.finish();
    if store.is_empty() {
        return Err(CliError::input("no samples in input"));
    }

    let matrix = cross_matrix(&store, level, rule).map_err(cross_error)?;
    let summary = summarize(&matrix).map_err(cross_error)?;
    let mut datasets = Vec::new();
    for (i, id) in matrix.dataset_ids.iter().enumerate() {
        let (reals, fakes) = class_scores(&store, id, level, rule).map_err(store_error)?;
        datasets.push(DatasetRow {
            dataset: id.clone(),
            n_real: reals.len(),
            n_fake: fakes.len(),
            intra_auc: matrix.get(i, i).value(),
        });
    }

    match args.format {
        FormatArg::Csv => {
            let mut text = matrix.to_csv();
            text.push_str("\nmetric,value\n");
            let intra = summary.intra_avg.map(fixed6).unwrap_or_default();
            for (name, v) in [
                ("cross_avg", fixed6(summary.cross_avg)),
                ("cross_min", fixed6(summary.cross_min)),
                ("cross_std", fixed6(summary.cross_std)),
                ("intra_avg", intra),
            ] {
                text.push_str(&format!("{name},{v}\n"));
            }
            emit_text(args.out.as_ref(), &text)?;
        }
        FormatArg::Json => {
            let config = EvalConfig {
                files: args.files.iter().map(|p| p.display().to_string()).collect(),
                level: args.level,
                aggregate: args.aggregate,
                format: args.format,
            };
            let manifest = RunManifest::new("eval", None, &config).with_inputs(inputs);
            let report = EvalReport {
                level: args.level,
                aggregate: args.aggregate,
                n_samples: store.len(),
                datasets,
                matrix,
                summary,
            };
            emit_report(args.out.as_ref(), &manifest, &report)?;
        }
    }
    Ok(EXIT_OK)
}
