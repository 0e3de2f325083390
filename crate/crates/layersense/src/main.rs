use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layersense::{commands, AppError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "layersense", version, about = "Layer-sensitivity benchmark on two-moons networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Report directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict prune/quant/robust to one model id.
    #[arg(long, global = true)]
    model: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the model zoo and measure ground-truth rankings.
    Gen,
    /// Score criteria and reductions against the ground truth.
    Bench,
    /// Sensitivity-budgeted pruning versus uniform budgets.
    Prune,
    /// Mixed-precision quantization versus uniform bit-widths.
    Quant,
    /// Bit-flip campaigns with partial redundant checking.
    Robust,
    /// Verify a dataset and report ranking diversity.
    Audit,
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides { seed: cli.seed, jobs: cli.jobs, dataset: cli.dataset, out: cli.out, model: cli.model });
    config.validate()?;
    match cli.command {
        Command::Gen => commands::gen(&config).map(drop),
        Command::Bench => commands::bench(&config).map(drop),
        Command::Prune => commands::prune(&config),
        Command::Quant => commands::quant(&config),
        Command::Robust => commands::robust(&config),
        Command::Audit => commands::audit(&config),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
