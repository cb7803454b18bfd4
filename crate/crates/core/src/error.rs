use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown client {0}")]
    UnknownClient(usize),

    #[error("rejected update from client {client}: {reason}")]
    RejectedUpdate { client: usize, reason: String },

    #[error("numeric divergence at global iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined dissimilarity: {0}")]
    UndefinedDissimilarity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from user input (config, arguments) rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidDimension(_))
    }
}
