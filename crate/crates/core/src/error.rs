use thiserror::Error;

/// Error type shared across the engine.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("sampler divergence: {0}")]
    SamplerDivergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
