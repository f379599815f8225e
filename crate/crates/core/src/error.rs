use thiserror::Error;

/// Reasons a point sequence is rejected as a contour.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContourError {
    #[error("too few points: {0} (need at least 5)")]
    TooFewPoints(usize),
    #[error("even point count: {0}")]
    EvenPointCount(usize),
    #[error("landmark index {index} out of range for {len} points")]
    LandmarkOutOfRange { index: usize, len: usize },
    #[error("duplicate landmarks")]
    DuplicateLandmarks,
    #[error("landmarks must satisfy basal1 < apex < basal2")]
    LandmarkOrder,
    #[error("self-intersection between segments {first} and {second}")]
    SelfIntersection { first: usize, second: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("heatmap {index} is not normalized")]
    NotNormalized { index: usize },
    #[error("heatmap {index} has zero total mass")]
    ZeroMass { index: usize },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
