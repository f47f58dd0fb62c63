use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use photherm::exec::configure_threads;
use photherm::Execution;
use photherm_cli::{commands, config, selftest, CliError};

#[derive(Parser)]
#[command(
    name = "photherm",
    version,
    about = "Equilibration and certification experiments on simulated photonic chips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Replace an existing run directory
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; 1 runs everything on the main thread
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full output distributions, sampled and exact, at every time
    Evolve,
    /// Single-mode marginal traces, distance to the generalized-Gibbs law, recurrences
    Gge,
    /// Two-setting fidelity certification with convergence traces
    Certify,
    /// Run the oracle checks
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = match cli.threads {
        Some(0) => return Err(CliError::Validation("--threads must be at least 1".into())),
        Some(1) => Execution::Sequential,
        Some(t) => {
            configure_threads(t).map_err(CliError::Validation)?;
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let name = match cli.command {
        Command::Selftest => {
            let report = selftest::run()?;
            print!("{report}");
            return if report.passed() {
                Ok(())
            } else {
                Err(CliError::Selftest(format!(
                    "{} of {} checks failed",
                    report.checks.iter().filter(|c| !c.passed).count(),
                    report.checks.len()
                )))
            };
        }
        Command::Evolve => "evolve",
        Command::Gge => "gge",
        Command::Certify => "certify",
    };
    let path = cli.config.ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let parsed = config::load(&path)?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let resolved = config::resolve(name, parsed, cli.seed, &base)?;
    let dir = commands::run(&resolved, &cli.out, cli.force, exec)?;
    println!("{}", dir.display());
    Ok(())
}
