use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected \"PIEH\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad dimensions {width}x{height}")]
    BadDimensions { width: i64, height: i64 },
    #[error("flow of {pixels} pixels exceeds the cap of {cap}")]
    Oversize { pixels: u64, cap: u64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("object {object} leaves the frame at frame {frame}")]
    ShapeOutOfBounds { object: usize, frame: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("unknown prototype initialization strategy {0:?}")]
    UnknownStrategy(String),
    #[error("invalid prototype dimensions k={k}, p={p} (both must be >= 2)")]
    InvalidDims { k: usize, p: usize },
    #[error("sinkhorn did not converge: marginal violation {violation:e} after {iterations} iterations")]
    NotConverged { violation: f64, iterations: usize },
    #[error("boundary band {band} too wide for a {width}x{height} field")]
    BandTooWide { band: usize, width: usize, height: usize },
    #[error("both foreground and background sets are empty")]
    BothSetsEmpty,
    #[error("sequence state used before pretraining")]
    UninitializedState,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no mask files in {0}")]
    EmptyDir(PathBuf),
    #[error("frame count mismatch: {0}")]
    FrameCountMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
