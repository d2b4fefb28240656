//! Batch command-line surface: configuration, commands, file formats.

mod commands;
mod config;
mod format;

pub use commands::{cmd_estimate, cmd_exact, cmd_fisher, cmd_sample, ResultManifest};
pub use config::{config_hash, parse_config, serialize_config, RunConfig};
pub use format::{fmt_float, read_pgm, write_csv, write_pgm};

/// Worker cap from the `FRINGE_FCS_THREADS` environment variable; the value
/// only throttles parallelism, outputs are invariant under it.
pub fn workers_from_env() -> Option<usize> {
    std::env::var("FRINGE_FCS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}
