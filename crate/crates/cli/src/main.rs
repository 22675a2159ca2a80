mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "hyperflux",
    version,
    about = "Presence-parameter pruning experiments"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Output directory for CSVs, checkpoints and the run manifest.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct StartNet {
    /// Start from a saved network instead of pretraining a fresh one.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dense pretraining; saves the network.
    Pretrain {
        /// Epochs; defaults to `train.pretrain_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Scheduled pruning followed by stabilization.
    Train {
        #[command(flatten)]
        start: StartNet,
    },
    /// Training under a fixed pressure coefficient.
    ConstantGamma {
        #[arg(long)]
        gamma: f64,
        /// Epochs; defaults to `sweep.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        start: StartNet,
    },
    /// Constant-pressure runs over several coefficients, assembled into a series.
    Sweep {
        /// Comma-separated coefficients; defaults to `sweep.gammas`.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        start: StartNet,
    },
    /// Iterative magnitude pruning with retraining.
    Imp {
        #[command(flatten)]
        start: StartNet,
    },
    /// Iterative first-order Taylor pruning with retraining.
    Taylor {
        #[command(flatten)]
        start: StartNet,
    },
    /// Segments a saliency series and fits the power law.
    Fit {
        /// Series CSV (method, threshold, density, accuracy, epoch).
        #[arg(long)]
        input: PathBuf,
        /// Accuracy drop, in percentage points, that marks collapse.
        #[arg(long)]
        eps_acc: Option<f64>,
        /// Reference accuracy; defaults to the best accuracy in the series.
        #[arg(long)]
        dense_accuracy: Option<f64>,
    },
    /// Weight histogram, per-layer sparsity and FLOPs of a saved network.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Trainer checkpoint whose flip counts should be exported too.
        #[arg(long)]
        trainer: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::ConstantGamma { .. } => "constant-gamma",
            Command::Sweep { .. } => "sweep",
            Command::Imp { .. } => "imp",
            Command::Taylor { .. } => "taylor",
            Command::Fit { .. } => "fit",
            Command::Export { .. } => "export",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            let line = serde_json::json!({
                "status": "error",
                "command": name,
                "message": err.to_string(),
                "chain": chain,
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
