//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was applied to tensors whose shapes do not conform.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A tensor would contain NaN or infinite values.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Gradient norm too small to define a normalized attack direction.
    #[error("degenerate gradient: norm {norm:.3e} below threshold {threshold:.0e} (flat score surface)")]
    DegenerateGradient { norm: f64, threshold: f64 },

    /// Target-class sampling is impossible: the base class holds all probability mass.
    #[error("no alternative class: base-class probability {0} is 1 within 1e-12")]
    NoAlternativeClass(f64),

    /// A model file declared an unsupported format version.
    #[error("unsupported model file format version {found} (this build reads version {expected})")]
    FormatVersion { found: u64, expected: u64 },

    /// A model file could not be decoded.
    #[error("malformed model file: {0}")]
    ModelFile(String),

    /// An IDX payload failed to parse; the offset is where decoding stopped.
    #[error("IDX parse error at byte {offset}: {detail}")]
    Idx { offset: usize, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
