use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("threshold not met: {0}")]
    Threshold(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(o2sif::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Threshold(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Core(_) | CliError::Io { .. } | CliError::Csv(_) => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<o2sif::Error> for CliError {
    fn from(e: o2sif::Error) -> Self {
        use o2sif::Error as E;
        match e {
            E::Diverged { .. } | E::NonFiniteGradient(_) => CliError::Divergence(e.to_string()),
            E::InvalidArgument(_) | E::MissingAncillary | E::WrongMode(_) => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
