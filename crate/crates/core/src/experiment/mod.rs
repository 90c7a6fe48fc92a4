//! Configured runs of the two applications, artifact export and the
//! invariant battery.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{ExperimentKind, InitialKind, ReferenceKind, RunConfig, SCHEMA_VERSION};
pub use run::{run, run_in, ComparisonRow, RunSummary, TimeSeriesRecord, OUTPUT_ROOT_ENV};
pub use verify::{verify, Report};
