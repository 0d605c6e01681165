//! Sensor-data pipeline: CSV ingestion, condensation to a fixed sampling
//! interval, moving-average denoising, z-score scaling, time-based
//! train/test split and sliding windows. A seeded synthetic degradation
//! generator stands in for recorded ageing data.

mod io;
mod norm;
mod preprocess;
mod series;
mod synth;
mod windows;

use std::path::PathBuf;

use thiserror::Error;

pub use io::{ingest_csv, read_preprocessed_marker, write_csv, CsvSchema, Ingested};
pub use norm::NormStats;
pub use preprocess::{condense, moving_average, parse_marker, preprocess_marker, split_at, DEFAULT_INTERVAL_HOURS, DEFAULT_MA_WINDOW};
pub use series::TimeSeries;
pub use synth::{synth_degradation, COVARIATE_NAMES, Recovery, SynthSpec};
pub use windows::{make_windows, WindowedDataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("time is not strictly increasing at data row {row}")]
    NonMonotone { row: usize },
    #[error("empty series: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("series too short: {required} rows required, {got} available")]
    TooShort { required: usize, got: usize },
    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, DataError>;
