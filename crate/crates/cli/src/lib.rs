//! Search, derivation, evaluation and inspection commands over a run
//! directory.

pub mod artifacts;
pub mod config;
pub mod derive_cmd;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod ranks;
pub mod search;

pub use config::{EpochPolicy, RunConfig};
pub use error::{CliError, CliResult};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MSR_THREADS";

/// Sizes the global thread pool from `MSR_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Argument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Argument(format!("cannot size the thread pool: {e}")))
}
