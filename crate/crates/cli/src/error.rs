//! Error type carrying the process exit code: 1 for validation and I/O
//! problems, 2 for runtime model errors such as vanishing posterior mass.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Model(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        CliError::Model(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Model(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("I/O error: {e}"))
    }
}

impl From<sspf_core::filter::FilterError> for CliError {
    fn from(e: sspf_core::filter::FilterError) -> Self {
        use sspf_core::filter::FilterError;
        match e {
            FilterError::ZeroPosteriorMass { .. } => CliError::Model(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<sspf_core::smoother::SmootherError> for CliError {
    fn from(e: sspf_core::smoother::SmootherError) -> Self {
        use sspf_core::smoother::SmootherError;
        match e {
            SmootherError::Impoverished { .. } | SmootherError::DegenerateSubsample { .. } => {
                CliError::Model(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<sspf_core::model::ModelError> for CliError {
    fn from(e: sspf_core::model::ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<sspf_core::simkit::SimError> for CliError {
    fn from(e: sspf_core::simkit::SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<sspf_core::pipeline::PipelineError> for CliError {
    fn from(e: sspf_core::pipeline::PipelineError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<sspf_core::decode::DecodeError> for CliError {
    fn from(e: sspf_core::decode::DecodeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<sspf_core::circstats::CircError> for CliError {
    fn from(e: sspf_core::circstats::CircError) -> Self {
        CliError::Validation(e.to_string())
    }
}
