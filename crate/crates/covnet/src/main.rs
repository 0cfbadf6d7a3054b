use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covnet::commands;
use covnet::config::Overrides;

/// Neural-network covariance estimation for random fields.
#[derive(Parser)]
#[command(name = "covnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Gaussian random fields into a field file.
    Simulate(Common),
    /// Fit a CovNet model to a field file.
    Fit(Common),
    /// Select hyperparameters by V-fold cross-validation and refit.
    Cv(Common),
    /// Eigendecompose a fitted model.
    Eigen(Common),
    /// Monte-Carlo relative error of estimators against a true kernel.
    Eval(Common),
    /// Export a kernel slice c(., v0) on a grid.
    Export(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, common) = match cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Fit(c) => ("fit", c),
        Command::Cv(c) => ("cv", c),
        Command::Eigen(c) => ("eigen", c),
        Command::Eval(c) => ("eval", c),
        Command::Export(c) => ("export", c),
    };
    let ov = Overrides {
        config: common.config,
        seed: common.seed,
        out: common.out,
        set: common.set,
    };
    match commands::run(name, &ov) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("covnet {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
