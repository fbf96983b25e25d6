use alloc::string::String;

/// Errors raised by the core kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: [usize; 3], found: [usize; 3] },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("data quality: {count} non-finite voxel(s)")]
    NonFinite { count: usize },
    #[error("label value {value} outside the class set at voxel {index}")]
    InvalidLabel { value: i64, index: usize },
    #[error("no foreground voxels in the supplied cases")]
    EmptyForeground,
    #[error("foreground intensities have zero variance (mean {mean})")]
    EmptyForegroundVariance { mean: f64 },
    #[error("predictor failed in stage {stage} at patch {patch}: {message}")]
    Predictor {
        stage: &'static str,
        patch: usize,
        message: String,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e @ Error::Predictor { .. } => e,
            e => Error::Stage {
                stage,
                source: alloc::boxed::Box::new(e),
            },
        }
    }

    /// Name of the pipeline stage that produced this error, when known.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } | Error::Predictor { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
