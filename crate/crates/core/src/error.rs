use thiserror::Error;

/// Errors produced anywhere in the solver stack.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid subdivision count {0}: at least one subdivision is required")]
    InvalidSubdivision(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mesh is not conforming: {0}")]
    NonConforming(String),
    #[error("degenerate cell {cell} with signed measure {measure:e}")]
    DegenerateCell { cell: usize, measure: f64 },
    #[error("mesh is not prismatic: {0}")]
    NotPrismatic(String),
    #[error("no periodic partner within tolerance for vertex {vertex} at ({x}, {y}, {z})")]
    PeriodicMismatch { vertex: usize, x: f64, y: f64, z: f64 },
    #[error("unsupported element family {family} on a {dim}D mesh")]
    UnsupportedFamily { family: String, dim: usize },
    #[error("function returned a non-finite value at ({x}, {y}, {z})")]
    NonFinite { x: f64, y: f64, z: f64 },
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("factorization breakdown at pivot {pivot} (original row {row}): |d| = {value:e}, pivot threshold {threshold:e}")]
    FactorizationBreakdown {
        pivot: usize,
        row: usize,
        value: f64,
        threshold: f64,
    },
    #[error("ordering failed: {0}")]
    Ordering(String),
    #[error("shift {re} + {im}i lies outside the sector |arg z| < pi - {delta}")]
    ShiftOutsideSector { re: f64, im: f64, delta: f64 },
    #[error("iteration did not converge after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("initial profile violates the vertical-mean constraint: |mean| = {0:e}")]
    ConstraintViolation(f64),
    #[error("sample time {0} is not an integer multiple of the time step")]
    MisalignedSample(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
