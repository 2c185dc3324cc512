use thiserror::Error;

/// Errors produced by the geco core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension overflow: {rows}x{cols}x{dim} exceeds the supported size")]
    DimensionOverflow { rows: u64, cols: u64, dim: u64 },

    #[error("non-finite value in {context} at index {index}")]
    NonFiniteValue { context: &'static str, index: usize },

    #[error("zero-norm patch vector at index {index}")]
    ZeroNormPatch { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("keypoint {id} has no location")]
    KeypointNotVisible { id: u32 },

    #[error("patch index {index} out of range (patch count {count})")]
    PatchIndexOutOfRange { index: usize, count: usize },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numerical overflow; increase lambda")]
    NumericalOverflow,

    #[error("non-finite gradient in stage {stage}")]
    NonFiniteGradient { stage: &'static str },

    #[error("solver contract violation: {0}")]
    SolverContractViolation(String),

    #[error("instance too large for the exact solver: {size} > {max} total bins")]
    InstanceTooLarge { size: usize, max: usize },

    #[error("empty keypoint schema")]
    EmptyKeypointSchema,

    #[error("no evaluable pairs")]
    NoEvaluablePairs,

    #[error("missing symmetric counterpart location for keypoint {id}")]
    MissingSymmetricLocation { id: u32 },

    #[error("part {part} has no samples")]
    EmptyPart { part: u32 },

    #[error("empty confusion matrix")]
    EmptyConfusionMatrix,

    #[error("no geometric parts in the restriction")]
    NoGeometricParts,

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
