use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sigood_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("cannot serialize config: {0}")]
    Serialize(String),

    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },

    /// Missing or contradictory arguments; exits with the usage code.
    #[error("{0}")]
    Usage(String),

    /// A self-check ran but did not pass.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
