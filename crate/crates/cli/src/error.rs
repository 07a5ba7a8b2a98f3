use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] tpcn_core::Error),
}

impl CliError {
    /// 2 for bad input or configuration, 3 for an incompatible checkpoint,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use tpcn_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(e) => match e {
                E::Checkpoint { .. } => 3,
                E::Validation(_) | E::Format { .. } | E::Io(_) | E::Json(_) => 2,
                E::Shape(_) | E::Index(_) | E::NonFiniteLoss { .. } => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
