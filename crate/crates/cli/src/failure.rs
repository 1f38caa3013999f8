//! Error type carrying the process exit code.

use std::fmt;
use std::path::Path;

use xdomain_core::data::DataError;
use xdomain_core::eval::EvalError;
use xdomain_core::nets::checkpoint::CheckpointError;
use xdomain_core::objective::ConfigError;
use xdomain_core::stats::StatsError;
use xdomain_core::tensor::TensorError;
use xdomain_core::trainer::TrainError;

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_INSUFFICIENT_DATA: u8 = 4;
pub const EXIT_GRAD_CHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::InvalidSpec(_) => EXIT_CONFIG,
            _ => EXIT_IO,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Fingerprint { .. } => EXIT_CONFIG,
            _ => EXIT_IO,
        };
        Self::new(code, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        let code = match e {
            StatsError::TooFewSamples { .. } => EXIT_INSUFFICIENT_DATA,
            _ => EXIT_NUMERIC,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Self::new(EXIT_NUMERIC, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric(e) => e.into(),
            TrainError::Config(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::NonFinite { .. } => Self::new(EXIT_NUMERIC, e.to_string()),
            TrainError::Io { .. } => Self::new(EXIT_IO, e.to_string()),
            TrainError::InsufficientData(_) => Self::new(EXIT_INSUFFICIENT_DATA, e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Numeric(e) => e.into(),
            EvalError::InsufficientData(_) => Self::new(EXIT_INSUFFICIENT_DATA, e.to_string()),
        }
    }
}
