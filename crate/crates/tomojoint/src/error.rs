use thiserror::Error;

/// Crate-wide error type. Pipeline stages wrap inner errors with their stage
/// name so a failed run reports where it died.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry ({field}): {message}")]
    InvalidGeometry {
        field: &'static str,
        message: String,
    },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    /// No ray of the acquisition intersects the volume. Almost always a
    /// misconfigured geometry (detector on the wrong side, volume off-center).
    #[error("volume lies outside the support of every ray")]
    GeometryVolumeMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension too small: {0}")]
    DimensionTooSmall(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point ({0}, {1}, {2}) mm outside transform domain")]
    OutOfDomain(f64, f64, f64),

    #[error("transform kind mismatch: {0}")]
    KindMismatch(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("line search failed after {trials} trials")]
    LineSearchFailure { trials: usize },

    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),

    #[error("reference volume has zero norm")]
    ZeroReference,

    #[error("corrupt file {path}: {message}")]
    CorruptFile { path: String, message: String },

    #[error("config: {0}")]
    ConfigInvalid(String),

    #[error("pipeline stage '{stage}': {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Pipeline {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 config, 4 io, 3 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::ConfigInvalid(_) | Error::InvalidSpec(_) => 2,
            Error::Io { .. } | Error::CorruptFile { .. } => 4,
            Error::Pipeline { source, .. } => source.exit_code().max(3),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<String>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}
