use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line tool: 2 for configuration
    /// problems, 3 for bad or missing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Version(_) | Error::Contract(_) | Error::Scheduling(_) => 2,
            Error::Dimension(_)
            | Error::Format(_)
            | Error::DegenerateInput(_)
            | Error::Alignment(_)
            | Error::Divergence(_)
            | Error::Io(_) => 3,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
