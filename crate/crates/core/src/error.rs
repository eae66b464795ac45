use thiserror::Error;

/// Errors raised across the fitting pipeline.
#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),

    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite coordinate in input point")]
    NonFinite,

    #[error("basis has {features} features, above the supported capacity of {capacity}")]
    Capacity { features: usize, capacity: usize },

    #[error("unsupported noise family `{0}`")]
    UnsupportedFamily(String),

    #[error("invalid noise parameter: {0}")]
    InvalidNoise(String),

    #[error("leading compensation block of order {order} is singular at this noise parameter (condition {condition:e}); try a different frequency")]
    SingularLeadingBlock { order: usize, condition: f64 },

    #[error("quadrature did not converge within {0} subdivisions")]
    QuadratureDiverged(usize),

    #[error("plan format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("singular value decomposition failed: {0}")]
    Decomposition(String),

    #[error("unknown shape `{0}`")]
    UnknownShape(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("no zero crossing of the surface inside the sampling box")]
    SurfaceNotFound,

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("level-set export supports dimensions 2 and 3, got {0}")]
    UnsupportedDimension(usize),

    #[error("level set is empty")]
    EmptyLevelSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FitError {
    /// Process exit code used by the command-line front end.
    ///
    /// 1 for data and validation problems, 2 for capacity and configuration
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FitError::Capacity { .. }
            | FitError::InvalidBasis(_)
            | FitError::UnsupportedFamily(_)
            | FitError::VersionMismatch { .. }
            | FitError::UnknownShape(_)
            | FitError::UnsupportedDimension(_)
            | FitError::InvalidArgument(_) => 2,
            FitError::SingularLeadingBlock { .. }
            | FitError::QuadratureDiverged(_)
            | FitError::Decomposition(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;
