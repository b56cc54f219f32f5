use thiserror::Error;

/// Failures of a CLI run, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input, configuration or files; exit code 2.
    #[error("{0}")]
    Input(String),
    /// A numerical routine failed; exit code 1.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 1,
        }
    }
}

impl From<landreg_core::Error> for CliError {
    fn from(e: landreg_core::Error) -> Self {
        use landreg_core::Error as E;
        match e {
            E::InvalidStep { .. }
            | E::OutOfRange { .. }
            | E::DimensionMismatch(_)
            | E::InvalidParameter(_)
            | E::MemoryBudget { .. } => CliError::Input(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(format!("csv error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
