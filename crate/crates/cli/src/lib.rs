//! Config-driven experiment runner for multi-narrow models.
//!
//! A sweep expands an `r x ipc x seed` grid into independent cells. Each
//! cell subsamples the training data, transforms the baseline graph, audits
//! it, trains it and runs diagnostics, leaving a self-describing run
//! directory. [`report::emit_report`] turns finished cells into plot-ready
//! CSV matrices and a JSON summary.

pub mod commands;
pub mod config;
pub mod report;
pub mod sweep;

pub use config::{DataSource, GraphSpec, LoadedData, SweepConfig};
pub use report::{emit_report, validate_report, ReportError};
pub use sweep::{run_sweep, CellResult, SweepError, SweepOutcome};

/// Environment variable that, when set to a non-empty value other than `0`,
/// runs sweep cells one at a time.
pub const DETERMINISTIC_ENV: &str = "MNLAB_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}
