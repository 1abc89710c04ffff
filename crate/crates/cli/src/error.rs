use erc_core::{FitError, ModelError, SamplerError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input data.
    #[error("{0}")]
    Validation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 4,
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Sampler(SamplerError::Initialization { .. }) => CliError::Internal(e.to_string()),
            FitError::Model(ModelError::Transform(_)) => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        FitError::from(e).into()
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        FitError::from(e).into()
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Outputs were written but some fit did not converge.
    ConvergenceWarning,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::ConvergenceWarning => 3,
        }
    }

    pub fn combine(self, other: Status) -> Status {
        if self == Status::Ok {
            other
        } else {
            self
        }
    }
}
