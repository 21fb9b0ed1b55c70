//! `crossauc`: Cross-AUC evaluation, published-table verification, loss and toy
//! training runs, score simulation and augmentation, all with deterministic reports.
//!
//! Exit codes: 0 ok, 1 a verification failed, 2 bad input, 3 insufficient data,
//! 4 numeric failure.

mod augment;
mod eval;
mod losses;
mod output;
mod simulate;
mod table;
mod toy;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "crossauc", version, about = "Cross-domain AUC toolkit for forgery detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Intra AUC per dataset, the Cross-AUC matrix and its summary from JSONL score files.
    Eval(eval::EvalArgs),
    /// Recompute avg/min/std of shipped published tables and compare with the claimed rows.
    VerifyTable(table::VerifyArgs),
    /// Write a JSONL score file whose pair AUCs reproduce a shipped table exactly.
    FixtureScores(table::FixtureScoresArgs),
    /// Evaluate the combined alignment loss on a batch document.
    Losses(losses::LossesArgs),
    /// Train and evaluate the toy patch model on synthetic two-domain data.
    Toytrain(toy::ToyArgs),
    /// Toy training over a grid of (lambda1, lambda2) and several seeds.
    Sweep(toy::SweepArgs),
    /// Generate shifted synthetic score domains plus per-domain histograms.
    Simulate(simulate::SimulateArgs),
    /// Produce one augmented training image, its mask and its patch labels.
    Augment(augment::AugmentArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => eval::run(&a),
        Command::VerifyTable(a) => table::run_verify(&a),
        Command::FixtureScores(a) => table::run_fixture_scores(&a),
        Command::Losses(a) => losses::run(&a),
        Command::Toytrain(a) => toy::run_train(&a),
        Command::Sweep(a) => toy::run_sweep(&a),
        Command::Simulate(a) => simulate::run(&a),
        Command::Augment(a) => augment::run(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
