//! `oanet`: generate synthetic datasets, train and evaluate correspondence
//! networks, and run the gradient checks.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "oanet", version, about = "Order-aware correspondence filtering and two-view geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSON lines).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Number of pairs; overrides `count` in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `steps` in the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate one method and write metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// ransac, oanet, oanet+ransac or pointcn_ablation.
        #[arg(long, default_value = "oanet")]
        method: String,
        /// Post-process the network output with RANSAC.
        #[arg(long)]
        ransac: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate several methods on one dataset.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint for oanet and oanet+ransac.
        #[arg(long)]
        oanet: Option<PathBuf>,
        /// Checkpoint for pointcn_ablation.
        #[arg(long)]
        pointcn: Option<PathBuf>,
        /// Comma-separated method names.
        #[arg(long, default_value = "ransac,oanet,oanet+ransac,pointcn_ablation", value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Export the top responses of every unpooling cluster for one pair.
    Responses {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Row of the dataset to analyse.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long, default_value_t = oanet::evalbench::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, seed, count } => commands::gen(common.config.as_deref(), &common.out, seed, count),
        Command::Train { common, seed, data, steps, resume } => {
            commands::train(common.config.as_deref(), &common.out, seed, &data, steps, resume.as_deref())
        }
        Command::Eval { common, seed, data, method, ransac, checkpoint } => {
            commands::eval(common.config.as_deref(), &common.out, seed, &data, &method, ransac, checkpoint.as_deref())
        }
        Command::Compare { common, seed, data, oanet, pointcn, methods } => commands::compare(
            common.config.as_deref(),
            &common.out,
            seed,
            &data,
            oanet.as_deref(),
            pointcn.as_deref(),
            &methods,
        ),
        Command::Responses { out, data, checkpoint, pair, top_k } => {
            commands::responses(&out, &data, &checkpoint, pair, top_k)
        }
        Command::Gradcheck { inject_fault } => commands::gradcheck(inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
