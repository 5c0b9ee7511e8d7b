use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid focal range: {0}")]
    InvalidRange(String),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("predicted distribution has zero mass at index {0} where the target is positive")]
    ZeroPredictedMass(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("sequence needs at least two frames, got {0}")]
    SingleFrame(usize),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
    #[error("insufficient length: {0}")]
    InsufficientLength(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("camera inside scene geometry: {0}")]
    CameraInsideGeometry(String),
}

pub type Result<T> = std::result::Result<T, Error>;
