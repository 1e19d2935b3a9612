use std::fmt;
use std::path::Path;

use ebm_core::bridge::DatasetError;
use ebm_core::checkpoint::CheckpointError;
use ebm_core::langevin::SampleError;
use ebm_core::train::TrainError;

/// Process exit status; see the `--help` footer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 1,
    Io = 2,
    Divergence = 3,
    Checkpoint = 4,
    Verification = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Usage, message)
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(ExitCode::Io, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Spec(_) | DatasetError::Tensor(_) => ExitCode::Usage,
            _ => ExitCode::Io,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(ExitCode::Checkpoint, e.to_string())
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        let code = match e {
            SampleError::NonFiniteGradient { .. } => ExitCode::Divergence,
            _ => ExitCode::Usage,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::new(ExitCode::Divergence, e.to_string()),
            TrainError::Sample(s) => s.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io(_) => CliError::new(ExitCode::Io, e.to_string()),
            other => CliError::usage(other.to_string()),
        }
    }
}
