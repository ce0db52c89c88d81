use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rwre_cli::{run_experiment, CliError, ExperimentConfig, Kind, Overrides};

/// Exact and Monte Carlo experiments on random walks in random environments.
#[derive(Parser, Debug)]
#[command(name = "rwre-lab", version)]
struct Cli {
    #[command(subcommand)]
    kind: Kind,
    /// Experiment config (JSON, or TOML with a .toml extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u128>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pruning threshold for dynamic programs.
    #[arg(long, global = true)]
    prune: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let flags = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out,
        prune: cli.prune,
    };
    let config = ExperimentConfig::load(&path)?.resolve(cli.kind, &flags)?;
    let summary = run_experiment(&config)?;
    println!("{}", serde_json::json!({"kind": summary.kind, "config_hash": summary.config_hash, "tables": summary.tables}));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
