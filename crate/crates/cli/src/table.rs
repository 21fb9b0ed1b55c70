use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crossauc_core::cross_auc::{verify_published, PublishedFixture, VerifyReport, PUBLISHED_TOLERANCE};
use crossauc_core::fixtures::{published_fixture, published_names, synthesize_scores};

use crate::output::{emit_report, emit_text, fixed6, read_text, CliError, CmdResult, RunManifest, EXIT_FAILED, EXIT_OK};

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Shipped table names, or `all`. Defaults to all when no file is given either.
    pub names: Vec<String>,
    /// Extra table files in the shipped JSON layout.
    #[arg(long = "fixture-file")]
    pub fixture_files: Vec<PathBuf>,
    #[arg(long, default_value_t = PUBLISHED_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerifyConfig {
    names: Vec<String>,
    fixture_files: Vec<String>,
    tolerance: f64,
}

#[derive(Serialize)]
struct TableReport {
    tolerance: f64,
    n_failed: usize,
    pass: bool,
    columns: Vec<VerifyReport>,
}

fn unknown(name: &str) -> CliError {
    CliError::input(format!(
        "unknown fixture {name:?}; shipped: {}",
        published_names().join(", ")
    ))
}

pub fn run_verify(args: &VerifyArgs) -> CmdResult {
    if !(args.tolerance.is_finite() && args.tolerance >= 0.0) {
        return Err(CliError::input(format!("tolerance {} must be >= 0", args.tolerance)));
    }
    let mut names: Vec<String> = Vec::new();
    for n in &args.names {
        if n == "all" {
            names.extend(published_names().into_iter().map(String::from));
        } else {
            names.push(n.clone());
        }
    }
    if names.is_empty() && args.fixture_files.is_empty() {
        names = published_names().into_iter().map(String::from).collect();
    }

    let mut fixtures = Vec::new();
    for n in &names {
        fixtures.push(published_fixture(n).ok_or_else(|| unknown(n))?);
    }
    let mut inputs = Vec::new();
    for path in &args.fixture_files {
        let (text, digest) = read_text(path)?;
        let f = PublishedFixture::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        fixtures.push(f);
        inputs.push(digest);
    }

    let mut columns = Vec::new();
    for f in &fixtures {
        let r = verify_published(f, args.tolerance).map_err(|e| CliError::input(e.to_string()))?;
        let detail: Vec<String> = r
            .fields
            .iter()
            .map(|c| format!("{} {} vs {} (delta {})", c.field, fixed6(c.computed), fixed6(c.claimed), fixed6(c.delta)))
            .collect();
        eprintln!("{} {}: {}", if r.pass { "pass" } else { "FAIL" }, r.name, detail.join(", "));
        columns.push(r);
    }
    let n_failed = columns.iter().filter(|c| !c.pass).count();
    let config = VerifyConfig {
        names,
        fixture_files: args.fixture_files.iter().map(|p| p.display().to_string()).collect(),
        tolerance: args.tolerance,
    };
    let manifest = RunManifest::new("verify-table", None, &config).with_inputs(inputs);
    let report = TableReport {
        tolerance: args.tolerance,
        n_failed,
        pass: n_failed == 0,
        columns,
    };
    emit_report(args.out.as_ref(), &manifest, &report)?;
    Ok(if n_failed == 0 { EXIT_OK } else { EXIT_FAILED })
}

#[derive(Args, Debug)]
pub struct FixtureScoresArgs {
    /// Shipped table name.
    pub name: String,
    /// Fakes per dataset; every published value must be a multiple of its inverse.
    #[arg(long, default_value_t = 1000)]
    pub denominator: u32,
    #[arg(long, default_value_t = 3)]
    pub reals: usize,
    /// JSONL output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_fixture_scores(args: &FixtureScoresArgs) -> CmdResult {
    let f = published_fixture(&args.name).ok_or_else(|| unknown(&args.name))?;
    let samples = synthesize_scores(&f, args.denominator, args.reals)
        .map_err(|e| CliError::input(format!("{}: {e}", args.name)))?;
    let mut text = String::new();
    for s in &samples {
        text.push_str(&s.to_json_line());
        text.push('\n');
    }
    emit_text(args.out.as_ref(), &text)?;
    Ok(EXIT_OK)
}
