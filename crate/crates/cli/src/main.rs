use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tac_core::codebook::DistanceMetric;
use tac_core::metrics::{default_fraction_grid, default_omega_grid};
use tac_core::model::Strategy;

use tac_cli::commands;
use tac_cli::config::{parse_scope, RunConfig};
use tac_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "tac", version, about = "Total activation classifier experiments")]
struct Cli {
    /// Run configuration (TOML) for `train` and `capacity`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured or default output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppresses per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a random binary codebook as JSON.
    GenCodes {
        #[arg(long)]
        num_classes: usize,
        #[arg(long)]
        code_length: usize,
        /// Output file; defaults to `<out-dir>/codebook.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a model from the configuration.
    Train,
    /// Scores a dataset with one or more strategies.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.csv` split or the prefix of an IDX pair.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated strategies such as `tac-l1,msp,tac-l2@1`.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
        /// `full` or a layer number; applies to TAC strategies without `@`.
        #[arg(long, default_value = "full")]
        scope: String,
    },
    /// Value-of-classification and accuracy-rejection curves.
    Reject {
        /// `predictions.csv` written by `eval`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',')]
        omegas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Out-of-distribution detection against a held-out pool.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        in_data: PathBuf,
        #[arg(long)]
        ood_data: PathBuf,
        /// Distances to compare; all five by default.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<DistanceMetric>,
        #[arg(long, default_value = "full")]
        scope: String,
    },
    /// Random-label memorization test.
    Capacity,
    /// Per-layer prediction quality.
    Layers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metric: Option<DistanceMetric>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::config("this command needs --config"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenCodes { num_classes, code_length, out } => {
            let out = out.clone().unwrap_or_else(|| out_dir.join("codebook.json"));
            commands::cmd_gen_codes(*num_classes, *code_length, seed, &out)?;
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            commands::cmd_train(&cfg, cli.quiet)?;
        }
        Command::Eval { checkpoint, data, strategies, scope } => {
            commands::cmd_eval(checkpoint, data, strategies, parse_scope(scope)?, &out_dir)?;
        }
        Command::Reject { predictions, omegas, fractions, folds } => {
            let omegas = if omegas.is_empty() { default_omega_grid(63, 1e-2, 1e2) } else { omegas.clone() };
            let fractions = if fractions.is_empty() { default_fraction_grid(101) } else { fractions.clone() };
            commands::cmd_reject(predictions, &omegas, &fractions, *folds, seed, &out_dir)?;
        }
        Command::Ood { checkpoint, in_data, ood_data, metrics, scope } => {
            commands::cmd_ood(checkpoint, in_data, ood_data, metrics, parse_scope(scope)?, &out_dir)?;
        }
        Command::Capacity => {
            let cfg = load_config(cli)?;
            commands::cmd_capacity(&cfg, cli.quiet)?;
        }
        Command::Layers { checkpoint, data, metric } => {
            commands::cmd_layers(checkpoint, data, *metric, &out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
