use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("{0}")]
    Numerical(String),

    #[error("{0}")]
    Io(String),

    #[error("{0}")]
    Core(globule_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<globule_core::Error> for CliError {
    fn from(e: globule_core::Error) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e @ (globule_core::Error::Parameter { .. }
            | globule_core::Error::EnsembleTooSmall { .. }
            | globule_core::Error::Grid(_)
            | globule_core::Error::Parse { .. }) => CliError::Validation(vec![e.to_string()]),
            e => CliError::Core(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
