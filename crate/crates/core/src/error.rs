use thiserror::Error;

/// Errors produced by the planner, simulator and their file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch in layer {layer}: {message}")]
    DimensionMismatch { layer: usize, message: String },

    #[error("unplaced expert {0}")]
    UnplacedExpert(usize),

    #[error("coordinate ({x}, {y}) is outside the {cols}x{rows} mesh")]
    OutOfMesh {
        x: usize,
        y: usize,
        cols: usize,
        rows: usize,
    },

    #[error("degenerate calibration set: {0}")]
    DegenerateCalibration(String),

    #[error("problem too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("unsupported schema version {0}")]
    Schema(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
