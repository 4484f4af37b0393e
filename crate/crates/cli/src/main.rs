//! `dualseg`: data generation, training, evaluation, gradient checks and
//! ablations for temporal action segmentation.

mod commands;
mod config;
mod error;
mod gradcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualseg_core::{EditAggregation, FeatureFormat};

use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "dualseg",
    version,
    about = "Temporal action segmentation with boundary and segment-shape losses"
)]
struct Cli {
    /// Worker threads for per-video and per-run parallelism (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; documented defaults fill in missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `loss.lambda_S=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<CliConfig, CliError> {
        CliConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum EditMode {
    PerVideo,
    Pooled,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the on-disk dataset layout.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "bin")]
        format: Format,
    },
    /// Train a model and write checkpoint, run log, metrics and predictions.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; the configured synthetic corpus is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score prediction label files against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Where to write the JSON report.
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "per-video")]
        edit: EditMode,
    },
    /// Compare analytic gradients of every loss and parameter block with finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train every arm × seed and tabulate mean ± sd of the test metrics.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// e.g. `baseline,+LB,+LS,+both`, `estart:0,10,20,30`, `allframes,decoupled`.
        #[arg(long)]
        arms: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::io(e.to_string()))?;
    }
    match cli.command {
        Command::GenData {
            cfg,
            out,
            seed,
            format,
        } => {
            let format = match format {
                Format::Bin => FeatureFormat::Binary,
                Format::Csv => FeatureFormat::Csv,
            };
            commands::gen_data(cfg.load()?, &out, seed, format)
        }
        Command::Train {
            cfg,
            data,
            out,
            seed,
        } => commands::train(cfg.load()?, data.as_deref(), &out, seed),
        Command::Eval {
            pred_dir,
            gt_dir,
            out,
            edit,
        } => {
            let edit = match edit {
                EditMode::PerVideo => EditAggregation::PerVideo,
                EditMode::Pooled => EditAggregation::Pooled,
            };
            commands::eval(&pred_dir, &gt_dir, &out, edit)
        }
        Command::Gradcheck {
            cfg,
            out,
            inject_fault,
        } => commands::gradcheck(&cfg.load()?, out.as_deref(), inject_fault),
        Command::Ablate {
            cfg,
            data,
            out,
            arms,
            seeds,
        } => {
            let seeds = commands::parse_seeds(&seeds)?;
            commands::ablate_cmd(cfg.load()?, data.as_deref(), &out, &arms, &seeds)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
