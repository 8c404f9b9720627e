//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor/sequence shapes. Always names both sides.
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    DimMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Invalid run configuration (bad key, bad value, inconsistent schedule).
    #[error("config error: {0}")]
    Config(String),

    /// API misuse: missing forward cache, empty sequence, zero beam width.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric evaluation produced NaN or Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Label cannot be aligned to the given number of time steps.
    #[error(
        "label of length {label_len} with {repeats} adjacent repeats needs at least \
         {needed} time steps, got {time_steps}"
    )]
    InfeasibleLabel {
        label_len: usize,
        repeats: usize,
        needed: usize,
        time_steps: usize,
    },

    /// Exhaustive-enumeration guard tripped.
    #[error("problem size too large: {0}")]
    TooLarge(String),

    /// A character has no index in the charset.
    #[error("character {ch:?} at position {pos} is not in the charset")]
    CharsetMiss { ch: char, pos: usize },

    /// A rate with an empty reference is undefined at sample level.
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    /// Malformed input corpus (missing image, duplicate id, bad labels file).
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Malformed bundle or checkpoint bytes.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Artifacts that must agree do not (checkpoint charset vs bundle charset).
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        lhs: impl std::fmt::Debug,
        rhs: impl std::fmt::Debug,
    ) -> Self {
        Error::DimMismatch {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
