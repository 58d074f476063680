//! Experiment harness over the tabular preference-optimization laboratory:
//! config loading with override flags, command orchestration, and run
//! directories that replay bitwise-identically.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

pub use commands::{run_command, CommandKind};
pub use config::{load_config, parse_overrides, RunConfig};
pub use report::RunReport;

/// Exit code category for an error: configuration problems map to 2,
/// numerical failures to 3, and I/O failures to 4.
pub fn exit_code(error: &tso_core::Error) -> i32 {
    use tso_core::Error::*;
    match error {
        Stage { source, .. } => exit_code(source),
        Input(_) | Config(_) | Parse(_) | EmptyDataset(_) | Capacity(_) => 2,
        Numerical(_) => 3,
        Io { .. } => 4,
    }
}
