use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use swa_core::experiment::{self, LoadedConfig, RunOptions};
use swa_core::Result;

#[derive(Parser)]
#[command(name = "swa", version, about = "Stochastic weight averaging experiments on small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> Result<(LoadedConfig, RunOptions)> {
        let loaded = LoadedConfig::load(&self.config)?;
        let opts = RunOptions {
            seed: self.seed,
            out: self.out.clone(),
            quiet: self.quiet,
        };
        Ok((loaded, opts))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured optimizer and schedule.
    Train(Common),
    /// Train, then average iterates over the last part of the budget.
    SwaTrain(Common),
    /// Report the top Hessian eigenvalue and trace of a checkpoint.
    Flatness {
        /// Checkpoint to analyse.
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Average checkpoint files.
    Soup {
        /// Input checkpoints.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Destination checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare stage-two schedules across seeds.
    CompareSchedules(Common),
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, opts) = c.load()?;
            let r = experiment::cmd_train(&cfg, &opts)?;
            println!("{}", r.dir.display());
        }
        Command::SwaTrain(c) => {
            let (cfg, opts) = c.load()?;
            let r = experiment::cmd_swa_train(&cfg, &opts)?;
            println!("{}", r.dir.display());
        }
        Command::Flatness { checkpoint, common } => {
            let (cfg, opts) = common.load()?;
            print_json(&experiment::cmd_flatness(&checkpoint, &cfg, &opts)?)?;
        }
        Command::Soup { inputs, out } => {
            print_json(&experiment::cmd_soup(&inputs, &out)?)?;
        }
        Command::CompareSchedules(c) => {
            let (cfg, opts) = c.load()?;
            let r = experiment::cmd_compare_schedules(&cfg, &opts)?;
            print!("{}", experiment::report::comparison_table(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
