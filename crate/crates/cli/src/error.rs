use std::path::PathBuf;

use thiserror::Error;

/// A malformed CSV cell or record. `row` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}: row {row}, column {column}: {message}", path.display())]
pub struct ParseError {
    pub path: PathBuf,
    pub row: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] mfkrig::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for configuration, parse and input errors; 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use mfkrig::Error as E;
        match self {
            CliError::Parse(_) | CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Model(e) => match e {
                E::DimensionMismatch(_)
                | E::IndexOutOfRange { .. }
                | E::DomainViolation(_)
                | E::EmptyGrid
                | E::InvalidConfig(_)
                | E::ConstantTruth => 2,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
