use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. Carries both shapes so the caller
    /// can see exactly what was passed.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Masked softmax / aggregation over a chunk with no valid positions.
    #[error("empty chunk")]
    EmptyChunk,

    /// A token sequence's query mask does not partition it into chunks.
    #[error("malformed query mask: {0}")]
    MalformedMask(String),

    /// A backward pass was given a cotangent that does not match the cache
    /// produced by the forward call.
    #[error("scan cache mismatch: {0}")]
    CacheMismatch(String),

    /// Binary format violation, with the byte offset where it was detected.
    #[error("{kind} at byte offset {offset}")]
    Format { kind: FormatErrorKind, offset: usize },

    #[error("duplicate tensor name in archive: {0:?}")]
    DuplicateName(String),

    /// Archive contents do not match the model's parameter set.
    #[error("archive/model name mismatch: missing {missing:?}, extra {extra:?}")]
    NameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("config error: {0}")]
    Config(String),

    /// Training loss became non-finite. Carries the last step that still
    /// produced a finite loss.
    #[error("training diverged after step {last_good_step} (loss {last_loss})")]
    Diverged { last_good_step: usize, last_loss: f64 },

    /// A loss evaluation inside a gradient check returned a non-finite value.
    #[error("non-finite loss while checking parameter group {group:?}")]
    NonFiniteLoss { group: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion,
    UnknownDtype,
    TooManyDims,
    Truncated,
    BadName,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::UnsupportedVersion => "unsupported version",
            FormatErrorKind::UnknownDtype => "unknown dtype",
            FormatErrorKind::TooManyDims => "too many dimensions",
            FormatErrorKind::Truncated => "truncated record",
            FormatErrorKind::BadName => "malformed entry name",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
