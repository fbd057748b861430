//! Command-line driver: dataset generation, training, testing and baselines.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{BaselineMethod, TestInit, TrainMethod};
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "rfmeta", version, about = "Meta-learned RF fingerprint localization")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Dataset directory written by `gen`; overrides `data` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Caps the worker thread count.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate environments, fingerprint databases and task dumps.
    Gen,
    /// Train meta-parameters on a generated dataset.
    Train {
        #[arg(value_enum)]
        method: TrainMethod,
    },
    /// Fine-tune on the test tasks and report localization errors.
    Test(TestArgs),
    /// Evaluate a fingerprint-matching baseline on the test queries.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct TestArgs {
    /// Checkpoint file, or the index written by `train maml-ts`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Start from random initialization.
    #[arg(long)]
    pub random: bool,
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {name} directory; pass --{name} or set `{name}` in the config")))
}

/// Resolves the config and flags, then runs the command.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let out = required(cli.out, &cfg.out, "out")?;
    let data = || required(cli.data.clone(), &cfg.data, "data");
    match cli.command {
        Command::Gen => {
            let manifest = commands::gen(&cfg, &out)?;
            println!(
                "wrote {} training domains and test domain {} to {}",
                manifest.train_domains.len(),
                manifest.test_domain,
                out.display()
            );
        }
        Command::Train { method } => {
            commands::train(&cfg, method, &data()?, &out)?;
            let name = method.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            println!("wrote {name} checkpoints to {}", out.display());
        }
        Command::Test(args) => {
            let init = match args.checkpoint {
                Some(path) => TestInit::Checkpoint(path),
                None => TestInit::Random,
            };
            let report = commands::test(&cfg, &init, &data()?, &out)?;
            print_summary(&report, &out);
        }
        Command::Baseline { method } => {
            let report = commands::baseline(&cfg, method, &data()?, &out)?;
            print_summary(&report, &out);
        }
    }
    Ok(())
}

fn print_summary(report: &rfmeta::evaluation::EvalReport, out: &Path) {
    println!(
        "{}: mean error {:.3} m, std {:.3} m over {} points; report in {}",
        report.method_tag,
        report.mean_error_m,
        report.std_error_m,
        report.n_points,
        out.display()
    );
}
