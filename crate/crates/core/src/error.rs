//! Crate-wide error type.

/// Errors produced by tape evaluation, solvers, and the on-disk formats.
///
/// File parsers distinguish a wrong file type ([`Error::BadMagic`]) from a
/// corrupt or incomplete file of the right type ([`Error::BadHeader`],
/// [`Error::Truncated`], [`Error::ChecksumMismatch`], [`Error::LengthMismatch`])
/// so callers can decide whether to fall back or abort.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a {expected} file (magic mismatch)")]
    BadMagic { expected: &'static str },

    #[error("bad header: {0}")]
    BadHeader(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward was already called on this tape")]
    BackwardConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),

    #[error(
        "total-variation descent produced a non-finite objective at iteration {iteration}; \
         retry with a smaller step or a larger smoothing weight"
    )]
    TvDiverged { iteration: usize },

    #[error("solver diverged with a non-finite loss or gradient at iteration {iteration}")]
    SolveDiverged { iteration: u64, trace: crate::neural::SolveTrace },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
