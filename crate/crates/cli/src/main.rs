use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "labnn", version, about = "Binary neural networks with learnable activation binarizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Number of images to analyze or dump.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Uniqueness,
    Similarity,
    Distribution,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and save its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every LAB placement over the four stages.
    SweepBlocks {
        #[command(flatten)]
        common: Common,
    },
    /// Uniqueness, similarity or distribution analysis of feature maps.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Count BOPs and FLOPs of the configured network.
    CountOps {
        #[command(flatten)]
        common: Common,
    },
    /// Per-operator inference latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write binarized feature maps as PGM images.
    DumpMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::SweepBlocks { common } => commands::sweep(&common),
        Command::Analyze {
            common,
            checkpoint,
            which,
        } => commands::analyze(&common, checkpoint.as_deref(), which),
        Command::CountOps { common } => commands::count_ops(&common),
        Command::Bench { common, checkpoint } => commands::bench(&common, checkpoint.as_deref()),
        Command::DumpMaps { common, checkpoint } => commands::dump_maps(&common, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
