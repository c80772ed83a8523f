use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: third homogeneous coordinate {0:e} is too close to zero")]
    DegeneratePoint(f64),
    #[error("homography is singular")]
    SingularHomography,
    #[error("structure value {ab} makes A*b too close to 1")]
    SingularStructure { ab: f64 },
    #[error("parallax {w} coincides with the distance to the epipole {q_norm}")]
    SingularParallax { w: f64, q_norm: f64 },
    #[error("pixel coincides with the epipole")]
    EpipoleCoincident,
    #[error("median absolute deviation is zero")]
    DegenerateScale,
    #[error("not enough data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("not enough rigid correspondences: need {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("no consensus: best inlier ratio {0:.3}")]
    NoConsensus(f64),
    #[error("too few pixels with usable parallax ({0})")]
    ParallaxTooSmall(usize),
    #[error("epipole system is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("refinement diverged: objective {before} -> {after}")]
    RefinementDiverged { before: f64, after: f64 },
    #[error("structure is degenerate (zero spread)")]
    DegenerateStructure,
    #[error("too few jointly visible pixels ({0})")]
    NoOverlap(usize),
    #[error("image has no contrast")]
    DegenerateImage,
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("bad magic number")]
    BadMagic,
    #[error("file is truncated")]
    TruncatedFile,
    #[error("non-finite value")]
    NonFinite,
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("no valid pixels")]
    EmptyValidSet,
    #[error("problem too large for exhaustive search ({0} variables)")]
    TooLarge(usize),
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("linear solve failed after {0} iterations")]
    SolveFailed(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
