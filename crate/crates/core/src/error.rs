use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiwError {
    #[error("points {0} and {1} coincide")]
    DuplicatePoints(usize, usize),
    #[error("point {0} lies outside the region")]
    OutOfRegion(usize),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("target density is not positive at world {0}")]
    NonpositiveDensity(usize),
    #[error("node-domain kernel sum underflows at node world {0}")]
    ZeroDenominator(usize),
    #[error("node-domain recursion denominator is not positive at world {0}")]
    NonpositiveDenominator(usize),
    #[error("density {density:e} below floor at world {world}")]
    DensityUnderflow { world: usize, density: f64 },
    #[error("kernel {0} has no third derivative")]
    KernelNotSmooth(&'static str),
    #[error("potential is singular at the origin")]
    SingularEvaluation,
    #[error("potential is not differentiable at the origin")]
    NondifferentiablePoint,
    #[error("worlds {0} and {1} collided")]
    CollisionDetected(usize, usize),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("symmetry violation: {0}")]
    SymmetryViolation(String),
    #[error("eigensolver failed: {0}")]
    EigenFailure(String),
    #[error("state index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("mismatched problem: {0}")]
    MismatchedProblem(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MiwError {
    fn from(e: std::io::Error) -> Self {
        MiwError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MiwError>;
