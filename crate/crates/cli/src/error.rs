use std::fmt;

use tst_core::data::DataError;
use tst_core::metrics::MetricsError;
use tst_core::model::ModelError;
use tst_core::training::{CheckpointError, TrainError};

use crate::config::ConfigError;

/// Process exit status reported by each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad configuration, arguments, schema or missing input.
    Usage = 2,
    /// Corrupt data or checkpoint.
    Corrupt = 3,
    /// Non-finite loss, gradient, parameter or forecast.
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message, keeping the exit class.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::NonMonotone { .. } | DataError::Csv(_) | DataError::Empty(_) => ExitKind::Corrupt,
            _ => ExitKind::Usage,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return Self {
                kind: ExitKind::Numerical,
                message: e.to_string(),
            };
        }
        match e {
            TrainError::Data(d) => d.into(),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::Unserializable(_) => ExitKind::Numerical,
            _ => ExitKind::Corrupt,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::usage(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
