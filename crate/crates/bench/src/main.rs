use std::path::PathBuf;
use std::process::ExitCode;

use asgo::par::{init_pool_from_env, Execution};
use asgo_bench::runner::{cmd_compare, cmd_run, cmd_sweep, default_compare_dir};
use asgo_bench::verify::{run_suite, Suite, RELEASE_SEED};
use asgo_bench::{BenchError, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Seeded optimizer experiments and verification suites.
///
/// Worker count comes from ASGO_WORKERS (1 = sequential).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config: a CSV per seed plus summary.json.
    Run { config: PathBuf },
    /// Run a verification suite and print its manifest.
    Verify {
        suite: Suite,
        #[arg(long, default_value_t = RELEASE_SEED)]
        seed: u64,
        /// Also write the manifest to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs on the same problem and align their metrics.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a config's grid and rank them.
    Sweep { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    let exec = Execution::from_env();
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = cmd_run(&cfg, exec)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Verify { suite, seed, out } => {
            let m = run_suite(suite, seed, exec)?;
            let text = serde_json::to_string_pretty(&m)?;
            if let Some(path) = out {
                std::fs::write(path, format!("{text}\n"))?;
            }
            println!("{text}");
            if !m.passed {
                let failed: Vec<&str> = m.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(BenchError::VerifyFailed(failed.join(", ")));
            }
        }
        Command::Compare { configs, out } => {
            let cfgs = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let report = cmd_compare(&cfgs, &out.unwrap_or_else(default_compare_dir), exec)?;
            println!("{}", serde_json::to_string_pretty(&report.columns)?);
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cmd_sweep(&cfg, exec)?;
            println!("{}", serde_json::to_string_pretty(&report.cells)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_pool_from_env();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
