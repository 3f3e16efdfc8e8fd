use std::path::Path;

/// Failure classes of the command-line tool, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(covmode::Error),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<covmode::Error> for CliError {
    fn from(e: covmode::Error) -> Self {
        use covmode::Error as E;
        match e {
            E::NotPositiveDefinite { .. }
            | E::NonPositiveTrace(_)
            | E::SingularDesign
            | E::IllConditioned { .. }
            | E::InvalidC(_)
            | E::DegenerateColumn(_) => CliError::Numerical(e),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
