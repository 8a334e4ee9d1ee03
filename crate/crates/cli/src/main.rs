mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Open-vocabulary segmentation of remote sensing imagery with rotation
/// aggregation.
#[derive(Debug, Parser)]
#[command(name = "ovrs", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.max_iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$OVRS_SCRATCH/<command>` or
    /// `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed applied to training order, parameter init and synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, masks, manifest).
    MakeSynth,
    /// Train a model on a manifest dataset.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint, or saved predictions, on a dataset split.
    Eval(commands::EvalArgs),
    /// Segment one image with free-form category names.
    Predict(commands::PredictArgs),
    /// Plot loss and metric curves from one or more run logs.
    PlotMetrics(commands::PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeSynth => commands::make_synth(&cli.common),
        Command::Train(a) => commands::train(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
        Command::Predict(a) => commands::predict(&cli.common, a),
        Command::PlotMetrics(a) => commands::plot_metrics(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
