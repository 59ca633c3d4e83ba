mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::Common;
use config::Loaded;

/// Sensitivity-aware velocity caching for ODE samplers.
#[derive(Parser)]
#[command(name = "sencache", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `0,3,5..8` (overrides `seeds` in the config).
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the sensitivity profile and write it to profile.csv.
    Calibrate(CommonArgs),
    /// Run the configured policy against references and report fidelity.
    Sample(CommonArgs),
    /// Sweep epsilon, the reuse cap n, or the calibration set size.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// epsilon | n | calib_size
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Plan a step schedule from the profile and compare with uniform spacing.
    Plan {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Consecutive-step velocity MAE along reference trajectories.
    Diagnose(CommonArgs),
}

fn setup(args: &CommonArgs) -> Result<(Loaded, Common)> {
    let cfg = Loaded::read(&args.config)?;
    let seeds = args.seeds.as_deref().map(commands::parse_seeds).transpose()?;
    let common = Common::resolve(&cfg, args.out.clone(), seeds)?;
    Ok((cfg, common))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(a) => {
            let (cfg, c) = setup(&a)?;
            commands::calibrate_cmd(&cfg, &c)
        }
        Command::Sample(a) => {
            let (cfg, c) = setup(&a)?;
            commands::sample_cmd(&cfg, &c)
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, c) = setup(&common)?;
            let values = values.as_deref().map(commands::parse_values).transpose()?;
            commands::sweep_cmd(&cfg, &c, axis, values)
        }
        Command::Plan { common, budget } => {
            let (cfg, c) = setup(&common)?;
            commands::plan_cmd(&cfg, &c, budget)
        }
        Command::Diagnose(a) => {
            let (cfg, c) = setup(&a)?;
            commands::diagnose_cmd(&cfg, &c)
        }
    }
}

/// 1 config, 2 numeric, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sencache::Error>() {
            return match e.class() {
                sencache::ErrorClass::Config => 1,
                sencache::ErrorClass::Numeric => 2,
                sencache::ErrorClass::Io => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
