use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at distance {norm:e} m from the sensor origin has no ray direction")]
    DegeneratePoint { norm: f64 },
    #[error("negative range {range}")]
    NegativeRange { range: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
    #[error("dense sensor ({dense_beams}x{dense_steps}) must be at least 2x the sparse sensor ({sparse_beams}x{sparse_steps})")]
    ResolutionMismatch {
        sparse_beams: usize,
        sparse_steps: usize,
        dense_beams: usize,
        dense_steps: usize,
    },
    #[error("no free-space rays available for negative sampling")]
    NoFreeSpace,
    #[error("negative ray fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("stage-0 prior needs a non-empty input cloud")]
    EmptyInput,
    #[error("invalid stage-0 config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("denoiser callback failed: {0}")]
    CallbackFailure(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },
    #[error("ddim_steps {steps} must be in [1, {t_prime}]")]
    InvalidStepCount { steps: usize, t_prime: usize },
    #[error("schedule needs at least 10 steps, got {0}")]
    ScheduleTooShort(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("non-finite activation in {stage}")]
    NonFiniteActivation { stage: &'static str },
    #[error("no forward tape recorded for this batch")]
    TapeMissing,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric needs a non-empty point cloud")]
    EmptyCloud,
    #[error("ground truth cloud is empty")]
    EmptyGroundTruth,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint config hash {found:016x} does not match config {expected:016x}")]
    CheckpointMismatch { expected: u64, found: u64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-level error covering every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    DivergenceDetected {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(IoError::Io(e))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
