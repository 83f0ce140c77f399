use soup_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing prerequisites:\n  {}", .0.join("\n  "))]
    Missing(Vec<String>),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 success, 1 usage/config, 2 data, 3 training, 4 compatibility, 5 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) => 1,
                Error::Data(_)
                | Error::Ingestion(_)
                | Error::SplitAccess(_)
                | Error::Format(_)
                | Error::Dimension(_)
                | Error::Index(_) => 2,
                Error::Training { .. } | Error::Numeric(_) => 3,
                Error::Compatibility(_) => 4,
                Error::Io { .. } => 5,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
