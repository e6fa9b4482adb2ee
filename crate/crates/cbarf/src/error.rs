use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum CbarfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("optimization diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("degenerate point set for alignment: {0}")]
    DegenerateAlignment(String),

    #[error("all replacement candidates exhausted for view {0}")]
    CandidatesExhausted(u32),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, CbarfError>;
