use thiserror::Error;

/// Errors raised by the networks, environments, channel and trainer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or sizes that disagree with a configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied a value outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Violation of the message exchange rules (e.g. duplicate senders).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed or incompatible checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl Error {
    /// Prefix the message with extra context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Input(m) => Error::Input(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
            Error::Checkpoint(m) => Error::Checkpoint(format!("{ctx}: {m}")),
            Error::Io(m) => Error::Io(format!("{ctx}: {m}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
