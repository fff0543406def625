use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config `{0}` is neither a file nor a builtin ({1})")]
    ConfigMissing(String, String),

    #[error("cannot read config `{0}`: {1}")]
    ConfigRead(String, std::io::Error),

    #[error("cannot write `{0}`: {1}")]
    Io(String, std::io::Error),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Core(#[from] slipctl::Error),
}

impl CliError {
    /// 1 for anything the user can fix on the command line or in the config,
    /// 2 for numerical faults and output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::ConfigMissing(..)
            | CliError::ConfigRead(..)
            | CliError::Plot(_) => 1,
            CliError::Io(..) => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
        }
    }
}
