use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use pssf_core::scenario::{
    cmd_learn, cmd_simulate, cmd_sweep, load_model, parse_values, RunError, ScenarioConfig,
};

/// Safety-filtered Segway runs with projected-disturbance certificates.
///
/// Exit status: 0 ok, 2 config error, 3 early termination,
/// 4 certificate failure, 1 other errors.
#[derive(Parser)]
#[command(name = "pssf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop run with and without a learned residual, certified.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Residual model written by `learn`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic residual training.
    Learn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// `simulate` once per value of a numeric config entry.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted config path, e.g. `run.dt` or `barrier.k`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<i32, RunError> {
    match cli.command {
        Command::Simulate { config, model, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let summary = cmd_simulate(&cfg, model.as_ref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(summary.exit_code())
        }
        Command::Learn { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let summary = cmd_learn(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(0)
        }
        Command::Sweep {
            config,
            param,
            values,
            model,
            out,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let values = parse_values(&values)?;
            let model = model.as_deref().map(load_model).transpose()?;
            let rows = cmd_sweep(&cfg, &param, &values, model.as_ref(), &out)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("{} runs, {failed} failed; see {}", rows.len(), out.join("sweep.csv").display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
