use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msr_cli::derive_cmd::run_derive;
use msr_cli::eval::run_eval;
use msr_cli::ranks::run_ranks;
use msr_cli::search::run_search;
use msr_cli::{init_threads, CliError, CliResult, RunConfig};
use msr_core::derive::SelectionMode;
use msr_core::spectral::SpectralConfig;

/// Architecture search by minimum stable rank.
#[derive(Parser, Debug)]
#[command(name = "msr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the supernet and write per-epoch checkpoints and rank tables.
    Search {
        #[arg(long)]
        config: PathBuf,
    },
    /// Derive a genotype from a search run.
    Derive {
        #[arg(long)]
        run: PathBuf,
        /// Use this epoch instead of the configured policy.
        #[arg(long)]
        epoch: Option<usize>,
        /// min or max; defaults to the run's configured mode.
        #[arg(long)]
        mode: Option<SelectionMode>,
        /// Output file; defaults to genotype_<mode>.json in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a derived genotype from scratch and report test error.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to eval_<genotype> under the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the rank table of a supernet checkpoint.
    Ranks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = SpectralConfig::default().rank_iterations)]
        rank_iterations: usize,
        /// Write the dump here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Search { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = run_search(&cfg)?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Derive { run, epoch, mode, out } => {
            let outcome = run_derive(&run, epoch, mode, out.as_deref())?;
            println!("{}", outcome.path.display());
        }
        Command::Eval { genotype, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = run_eval(&genotype, &cfg, out.as_deref())?;
            println!(
                "test_loss={} test_accuracy={} test_error={}",
                outcome.test_loss, outcome.test_accuracy, outcome.test_error
            );
        }
        Command::Ranks {
            checkpoint,
            rank_iterations,
            out,
        } => {
            let spectral = SpectralConfig {
                rank_iterations,
                ..SpectralConfig::default()
            };
            spectral.validate()?;
            let (_, text) = run_ranks(&checkpoint, &spectral)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let summary = msg
                .lines()
                .take_while(|l| !l.trim().is_empty() && !l.starts_with("Usage:"))
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" ");
            let summary = summary.trim_start_matches("error: ");
            eprintln!("{}", CliError::Argument(summary.to_string()).report());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
