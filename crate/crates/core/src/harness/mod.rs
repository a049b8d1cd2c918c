//! Horizon simulation: one market instance per interval, built from a
//! template and normalized profiles, cleared independently under a design,
//! with energy and money aggregated over the horizon.

mod data;
mod report;
mod synthetic;

pub use data::{ingest, ingest_files, TimeSeriesBundle, TIMESTAMP_FORMAT};
pub use report::{simulate, trade_breakdown, Flow, HorizonReport, SimulationOptions, SkippedStep, StepRecord, Totals};
pub use synthetic::gen_synthetic;

use thiserror::Error;

use crate::clearing::ClearingError;
use crate::model::ValidationError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{source_name}, line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{what}: expected {expected} rows, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("timestamps of profiles and prices differ at step {step}")]
    TimestampMismatch { step: usize },
    #[error("unknown peer `{0}`")]
    UnknownPeer(String),
    #[error("time step changes at step {step}")]
    NonUniformTimestep { step: usize },
    #[error("{series} at step {step}: value {value} out of range")]
    ValueOutOfRange { series: String, step: usize, value: f64 },
    #[error("the horizon has no steps")]
    EmptyHorizon,
    #[error("invalid instance: {0}")]
    Instance(#[from] ValidationError),
    #[error("invalid instance file: {0}")]
    InstanceParse(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: ClearingError },
    #[error("window {start}..{end} is outside the horizon of {steps} steps")]
    WindowOutOfRange { start: usize, end: usize, steps: usize },
}
