use thiserror::Error;

/// Failure modes of a subcommand, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing inputs or an invalid config.
    #[error("usage: {0}")]
    Usage(String),

    /// The command ran but a checked invariant did not hold.
    #[error("invariant violated: {}", .0.join(", "))]
    Invariant(Vec<String>),

    #[error("{0}")]
    Core(#[from] focus_core::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) => core_exit_code(e),
            CliError::Io(_) => 2,
        }
    }
}

fn core_exit_code(e: &focus_core::Error) -> i32 {
    use focus_core::Error::*;
    match e {
        Config { .. } | Checkpoint { .. } | InvalidArgument { .. } | Json(_) | Io(_) | Dump(_) => 2,
        _ => 1,
    }
}

pub type CliResult<T> = Result<T, CliError>;
