use std::path::PathBuf;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm feature vector at cell {0}")]
    ZeroNormFeature(usize),
    #[error("matrix too small to drop dustbin: {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("cell ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid depth {depth} at cell {cell}")]
    InvalidDepth { cell: usize, depth: f64 },
    #[error("insufficient matches: {got} usable, {needed} needed")]
    InsufficientMatches { got: usize, needed: usize },
    #[error("every RANSAC hypothesis was degenerate")]
    AllHypothesesDegenerate,
    #[error("no target falls inside the aerial coverage")]
    NoValidTargets,
    #[error("non-differentiable point: {0}")]
    NonDifferentiablePoint(String),
    #[error("could not place camera after {0} attempts")]
    PlacementFailure(usize),
    #[error("training diverged at step {step}: loss {loss} > 1e3 x initial {initial}")]
    DivergenceDetected { step: usize, loss: f64, initial: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("metadata sidecar missing: {0}")]
    MetadataMissing(PathBuf),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
