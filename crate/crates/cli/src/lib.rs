//! Command-line front end: experiment configs, subcommands and artifact files.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ConfigError, Experiment, ExperimentConfig, Mode, Overrides};

#[derive(Debug, Parser)]
#[command(name = "iceprune", version, about = "Structured pruning with gated fine-tuning and auto-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment TOML file.
    #[arg(long, short)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl ConfigArgs {
    fn load(&self) -> Result<Experiment, ConfigError> {
        Experiment::from_file(&self.config, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model from scratch and write a checkpoint.
    Pretrain(ConfigArgs),
    /// Prune the pretrained checkpoint.
    Prune {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run only the hyperparameter search on subsampled data.
    Autotune(ConfigArgs),
    /// Run the four component ablations with fixed hyperparameters.
    Ablate(ConfigArgs),
    /// Join run summaries into comparison and scatter tables.
    Compare {
        /// Run summary JSON files.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print a run summary; optionally re-emit its CSV files.
    Report {
        summary: PathBuf,
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Write the configured generated dataset to files.
    Synth {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            commands::pretrain(&a.load()?)?;
        }
        Command::Prune { args, mode } => {
            let exp = match mode {
                Some(m) => {
                    let mut e = args.load()?;
                    e.config.prune.mode = m;
                    e
                }
                None => args.load()?,
            };
            commands::prune(&exp)?;
        }
        Command::Autotune(a) => {
            commands::autotune(&a.load()?)?;
        }
        Command::Ablate(a) => {
            commands::ablate(&a.load()?)?;
        }
        Command::Compare { summaries, out_dir } => {
            commands::compare(&summaries, &out_dir)?;
        }
        Command::Report { summary, emit_csv } => commands::report(&summary, emit_csv.as_deref())?,
        Command::Synth { args, out_dir } => commands::synth(&args.load()?, &out_dir)?,
    }
    Ok(())
}

/// 0 on success, 2 for configuration errors, 3 for anything else.
pub fn exit_code(result: &anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) => 2,
        Err(_) => 3,
    }
}
