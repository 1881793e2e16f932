use thiserror::Error;

/// Failures of a run, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(skeld::Error),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("missing run artifact: {0}")]
    MissingArtifact(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Core(skeld::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::MissingArtifact(_) => 5,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<skeld::Error> for CliError {
    fn from(e: skeld::Error) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e),
            skeld::Error::Infeasible(m) => CliError::Infeasible(m),
            skeld::Error::Io(e) => CliError::Io(e),
            e => CliError::Core(e),
        }
    }
}
