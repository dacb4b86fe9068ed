use crate::config::ConfigError;
use crate::io::IoError;

/// Failure of a subcommand, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] IoError),
    #[error("{0}")]
    Output(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 1,
            RunError::Config(ConfigError::MissingFile(_)) => 3,
            RunError::Config(_) => 2,
            RunError::Data(_) | RunError::Output(_) => 3,
            RunError::Numerical(_) => 4,
        }
    }
}

impl From<sage_hbf_core::error::Error> for RunError {
    fn from(e: sage_hbf_core::error::Error) -> Self {
        use sage_hbf_core::error::Error as E;
        match e {
            E::InvalidConfig(what) => RunError::Config(ConfigError::Invalid("parameter", what.into())),
            E::Empty(_) | E::ShapeMismatch { .. } | E::ZeroDataset => RunError::Data(IoError::Dimension(e.to_string())),
            E::DegenerateGeometry | E::DegeneratePrecoder | E::SingularChannel => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Output(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Output(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RunError>;
