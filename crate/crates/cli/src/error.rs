use std::fmt;

use tangentconv::engine::{CheckpointError, EngineError};
use tangentconv::io::{CloudError, PlyError, SceneError};
use tangentconv::network::NetworkError;
use tangentconv::precompute::{CacheError, PlanError};
use tangentconv::train::TrainError;

/// Machine-readable failure class, printed as the first token of the error line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Io,
    Parse,
    Config,
    Mismatch,
    Numeric,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Io => "E_IO",
            Self::Parse => "E_PARSE",
            Self::Config => "E_CONFIG",
            Self::Mismatch => "E_MISMATCH",
            Self::Numeric => "E_NUMERIC",
            Self::Internal => "E_INTERNAL",
        }
    }

    /// Process exit status.
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Io => 3,
            Self::Parse => 4,
            Self::Config => 2,
            Self::Mismatch => 5,
            Self::Numeric => 6,
            Self::Internal => 70,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: ErrorCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ErrorCode, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    /// The single line written to stderr.
    pub fn line(&self) -> String {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error {}: {flat}", self.code.as_str())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorCode::Io, e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(ErrorCode::Io, e)
    }
}

impl From<PlyError> for CliError {
    fn from(e: PlyError) -> Self {
        let code = match e {
            PlyError::Io(_) => ErrorCode::Io,
            PlyError::MissingLabels | PlyError::PaletteTooSmall(_) => ErrorCode::Mismatch,
            _ => ErrorCode::Parse,
        };
        Self::new(code, e)
    }
}

impl From<CloudError> for CliError {
    fn from(e: CloudError) -> Self {
        let code = match e {
            CloudError::LabelRange { .. } | CloudError::LengthMismatch { .. } => ErrorCode::Mismatch,
            _ => ErrorCode::Parse,
        };
        Self::new(code, e)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        let code = match e {
            SceneError::Parse(_) => ErrorCode::Parse,
            _ => ErrorCode::Config,
        };
        Self::new(code, e)
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        let code = match e {
            CacheError::Io(_) => ErrorCode::Io,
            CacheError::StaleSource => ErrorCode::Mismatch,
            _ => ErrorCode::Parse,
        };
        Self::new(code, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => ErrorCode::Io,
            CheckpointError::Dtype { .. } => ErrorCode::Mismatch,
            _ => ErrorCode::Parse,
        };
        Self::new(code, e)
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        let code = match e {
            PlanError::Config(_) => ErrorCode::Config,
            _ => ErrorCode::Mismatch,
        };
        Self::new(code, e)
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::NonFinite { .. } => ErrorCode::Numeric,
            EngineError::NoLabels => ErrorCode::Mismatch,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Engine(e) => e.into(),
            NetworkError::Config(_) => Self::new(ErrorCode::Config, e),
            _ => Self::new(ErrorCode::Mismatch, e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Network(e) => e.into(),
            TrainError::Plan(e) => e.into(),
            TrainError::Cloud(e) => e.into(),
            TrainError::Scene(e) => e.into(),
            TrainError::NonFinite { .. } => Self::new(ErrorCode::Numeric, e),
            TrainError::Config(_) => Self::new(ErrorCode::Config, e),
            TrainError::Callback(m) => Self::new(ErrorCode::Io, m),
            _ => Self::new(ErrorCode::Mismatch, e),
        }
    }
}
