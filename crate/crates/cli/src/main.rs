use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cat_core::checkpoint::Checkpoint;
use cat_core::harness::{self, ExperimentConfig, Failure, InspectTarget};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cat", version, about = "Continual learning of mixed similar and dissimilar tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured variant over every seed.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set learner.kb_width=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from per-seed checkpoints where they exist.
        #[arg(long)]
        resume: bool,
    },
    /// Run the ablation grid on the same task sequences.
    Ablate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print masks, similarity vectors or attention weights from a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        #[arg(value_enum)]
        what: What,
    },
    /// Build and cache the task sequences for every seed.
    PrepareData {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Masks,
    Tsv,
    Attention,
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path, overrides).map_err(Failure::Config)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, overrides, resume } => {
            let cfg = load(&config, &overrides)?;
            let report = harness::run(&cfg, resume)?;
            let a = &report.aggregate;
            println!("{} {}: mean final accuracy {:.4} over {} seeds", cfg.name, report.variant, a.overall, report.seeds.len());
        }
        Command::Ablate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            print!("{}", harness::ablate(&cfg)?.to_csv());
        }
        Command::Inspect { checkpoint, what } => {
            let ck = Checkpoint::load(&checkpoint).map_err(Failure::Data)?;
            let target = match what {
                What::Masks => InspectTarget::Masks,
                What::Tsv => InspectTarget::Tsv,
                What::Attention => InspectTarget::Attention,
            };
            print!("{}", harness::inspect(&ck, target).map_err(Failure::Runtime)?);
        }
        Command::PrepareData { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            for p in harness::prepare_data(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
