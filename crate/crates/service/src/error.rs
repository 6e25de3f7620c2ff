use std::io;

use sonotrap_core::Error as CoreError;
use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0}")]
    Io(#[from] io::Error),

    #[error("session file version {found}, expected {expected}")]
    VersionMismatch { expected: u64, found: u64 },

    #[error("cannot parse {what} at line {line}, column {column}: {message}")]
    Parse {
        what: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{0}")]
    Invalid(String),
}

impl ServiceError {
    pub(crate) fn parse(what: &str, e: &serde_json::Error) -> Self {
        ServiceError::Parse {
            what: what.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }

    /// Bad input rather than a failure while carrying out valid work.
    pub fn is_validation(&self) -> bool {
        match self {
            ServiceError::Core(e) => !matches!(e, CoreError::SensorIo(_) | CoreError::NoEdges),
            ServiceError::Io(_) => false,
            ServiceError::VersionMismatch { .. } | ServiceError::Parse { .. } | ServiceError::Invalid(_) => true,
        }
    }

    /// 2 for validation errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }

    /// Short machine-readable class used in protocol error events.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(CoreError::OutOfVolume { .. }) => "out_of_volume",
            ServiceError::Core(CoreError::UnstablePlan { .. }) => "unstable_plan",
            ServiceError::Core(CoreError::SensorRange(_)) => "sensor_range",
            ServiceError::Core(_) | ServiceError::Invalid(_) => "invalid",
            ServiceError::VersionMismatch { .. } => "version_mismatch",
            ServiceError::Parse { .. } => "parse",
            ServiceError::Io(_) => "io",
        }
    }
}
