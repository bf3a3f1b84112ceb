use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate simplex {0}")]
    DegenerateSimplex(usize),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("point lies outside simplex {0}")]
    OutsideSimplex(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("invalid transition table: {0}")]
    InvalidTable(String),
    #[error("inconsistent state: {0}")]
    InconsistentState(String),
    #[error("solver diverged at iteration {0}")]
    Diverged(usize),
    #[error("vertex {0} cannot be removed")]
    NotRemovable(usize),
    #[error("split point too close to a face of simplex {0}")]
    TooCloseToFace(usize),
    #[error("label maps differ in size")]
    GridMismatch,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("snapshot version {0} is not supported")]
    SnapshotVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
