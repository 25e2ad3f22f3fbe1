use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use protoparts_cli::commands::{self, EvalSplit};
use protoparts_cli::config::RunConfig;

/// Interpretable prototypical-part image classification pipeline.
#[derive(Debug, Parser)]
#[command(name = "protoparts", version, about)]
struct Cli {
    /// JSON run configuration; defaults are used when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed of every pipeline stage
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Directory for run artifacts
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset tree under OUT/dataset
    Synth,
    /// Train the prototypical-part classifier on a dataset tree
    Train {
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Train the plain CNN baseline under the identical budget
    TrainBaseline {
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Re-snap the prototypes of a checkpoint onto its training patches
    Push {
        /// Prototype checkpoint to push
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        /// Checkpoint to evaluate (prototype or baseline)
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Split to evaluate
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Write explanation artifacts for one patch
    Explain {
        /// Prototype checkpoint with pushed prototypes
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Patch id to explain; defaults to the first test patch
        #[arg(long, value_name = "PATCH_ID")]
        id: Option<String>,
    },
    /// Embed activation vectors into 3-D and render scatter plots
    Embed {
        /// Prototype checkpoint with pushed prototypes
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset root directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Print a checkpoint header as JSON
    Inspect {
        /// Checkpoint to inspect
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    cfg.validate()?;
    cfg.write_resolved(&cli.out)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &cli.out),
        Command::Train { data } => commands::train(&cfg, data, &cli.out),
        Command::TrainBaseline { data } => commands::train_baseline(&cfg, data, &cli.out),
        Command::Push { checkpoint, data } => commands::push(&cfg, checkpoint, data, &cli.out),
        Command::Eval { checkpoint, data, split } => {
            commands::eval(&cfg, checkpoint, data, *split, &cli.out)
        }
        Command::Explain { checkpoint, data, id } => {
            commands::explain_one(&cfg, checkpoint, data, id.as_deref(), &cli.out)
        }
        Command::Embed { checkpoint, data } => commands::embed(&cfg, checkpoint, data, &cli.out),
        Command::Inspect { checkpoint } => commands::inspect(checkpoint),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
