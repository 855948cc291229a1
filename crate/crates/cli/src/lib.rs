//! Command implementations behind the `dcrf` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use checkpoint::{Checkpoint, Stage};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Sizes the global worker pool from `DCRF_THREADS` (unset or 0: automatic).
pub fn init_threads() -> CliResult<()> {
    let n = match std::env::var("DCRF_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("DCRF_THREADS={v:?} is not a count")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}
