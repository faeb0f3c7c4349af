use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

/// Change detection between two views of a scene taken at different times.
#[derive(Parser, Debug)]
#[command(name = "viewchange", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate dense flow from t0 to t1: matching, RANSAC, densification.
    Flow(commands::FlowArgs),
    /// Generate a synthetic dataset with exact flow and change masks.
    Synth(commands::SynthArgs),
    /// Train a network on the training pairs of one fold.
    Train(commands::TrainArgs),
    /// Predict a change-probability image for a pair.
    Predict(commands::PredictArgs),
    /// Score probability images against ground-truth masks.
    Evaluate(commands::EvaluateArgs),
    /// Render flow fields or prediction overlays.
    Visualize(commands::VisualizeArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = commands::setup(&cli.global).and_then(|cfg| match cli.command {
        Command::Flow(a) => commands::flow(&cfg, &a),
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Predict(a) => commands::predict(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a),
        Command::Visualize(a) => commands::visualize(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
