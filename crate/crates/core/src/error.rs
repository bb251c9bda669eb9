use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("rect [{x0},{x1})x[{y0},{y1}) outside {width}x{height} image")]
    RectOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid depth {0} (must be finite and > 0)")]
    InvalidDepth(f64),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("insufficient samples: {got} valid, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("eigen solver did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
