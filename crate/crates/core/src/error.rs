use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Config(_) | Error::Format(_) => 1,
            Error::Numeric(_) => 2,
            Error::Io(_) => 3,
        }
    }
}
