//! `prunelab` — structured pruning laboratory for small decoder transformers.
//!
//! Every failure leaves one JSON object on stderr and a nonzero exit code, so
//! the binary composes with scripts without scraping free-form text.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod config;
mod error;
mod io;
mod stages;

#[derive(Debug, Parser)]
#[command(name = "prunelab", version, about = "Structured pruning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Initialize a checkpoint, optionally training it on a synthetic task.
    Build(stages::BuildArgs),
    /// Inspect the parameter dependency graph of a checkpoint.
    Graph(stages::GraphArgs),
    /// Score coupled groups on calibration data and remove the least important.
    Prune(stages::PruneArgs),
    /// Recover a pruned checkpoint with low-rank adapters on task shots.
    Finetune(stages::FinetuneArgs),
    /// Measure task accuracy and held-out perplexity.
    Eval(stages::EvalArgs),
    /// Cross every prompt template with every task.
    PromptMatrix(stages::MatrixArgs),
    /// Fine-tune fresh adapters at several shot counts and tabulate.
    SweepShots(stages::SweepArgs),
    /// Sample text from a checkpoint.
    Generate(stages::GenerateArgs),
    /// Render stored or published results as text tables.
    Report(stages::ReportArgs),
    /// Full pipeline: build, prune, finetune, eval.
    Run(stages::RunArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            let err = error::CliError::new("args", e.render());
            eprintln!("{}", err.to_json());
            std::process::exit(2);
        }
    };
    let outcome = match &cli.command {
        Command::Build(a) => stages::cmd_build(a),
        Command::Graph(a) => stages::cmd_graph(a),
        Command::Prune(a) => stages::cmd_prune(a),
        Command::Finetune(a) => stages::cmd_finetune(a),
        Command::Eval(a) => stages::cmd_eval(a),
        Command::PromptMatrix(a) => stages::cmd_matrix(a),
        Command::SweepShots(a) => stages::cmd_sweep(a),
        Command::Generate(a) => stages::cmd_generate(a),
        Command::Report(a) => stages::cmd_report(a),
        Command::Run(a) => stages::cmd_run(a),
    };
    if let Err(e) = outcome {
        eprintln!("{}", e.to_json());
        std::process::exit(1);
    }
}
