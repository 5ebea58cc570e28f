//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("wavelengths not strictly increasing: {0}")]
    WavelengthOrder(String),
    #[error("header parse error: {0}")]
    HeaderParse(String),
    #[error("payload size mismatch: {0}")]
    PayloadSizeMismatch(String),
    #[error("unsupported interleave: {0}")]
    UnsupportedInterleave(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("too few bands: {0}")]
    TooFewBands(String),
    #[error("too few pixels: {0}")]
    TooFewPixels(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("missing HR bands: {0}")]
    MissingHrBands(String),
    #[error("odd spatial dimensions: {0}")]
    OddDimensions(String),
    #[error("empty dataset: {0}")]
    DataEmpty(String),
    #[error("rank-deficient data: {0}")]
    RankDeficient(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("zero spectrum at pixel {0}")]
    ZeroSpectrum(usize),
    #[error("image too small for SSIM window: {0}")]
    TooSmallForWindow(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
