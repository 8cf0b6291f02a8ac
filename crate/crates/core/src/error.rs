use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported derivative order {0} (at most 2)")]
    UnsupportedOrder(usize),
    #[error("arity mismatch: expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("unstable step size: {0}")]
    Unstable(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
