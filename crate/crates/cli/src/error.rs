use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files or inputs; exit code 1.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Clap(#[from] clap::Error),
    /// A check that ran to completion but did not pass; exit code 1.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    /// Exit code 2 for runtime failures (i/o, divergence), 1 otherwise.
    Core(#[from] mirror_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mirror_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Clap(_) | CliError::Failed(_) => 1,
            // a missing input is a usage problem; other i/o failures are not
            CliError::Core(E::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
            CliError::Core(E::Io { .. } | E::NonFiniteLoss { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}
