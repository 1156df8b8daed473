use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design gram matrix is singular or ill-conditioned (min/max eigenvalue ratio {ratio:.3e})")]
    SingularDesign { ratio: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("active-set loop exceeded its cap of {0} changes")]
    MaxIterations(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("gene ids cannot be aligned: {0}")]
    GeneMismatch(String),

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("moment matrix of squared proportions is singular (too few samples or collinear proportions)")]
    SingularMomentMatrix,

    #[error("bias-corrected moment matrix is not positive definite (bias terms too large relative to signal)")]
    SingularCorrectedMoment,

    #[error("subject covariance is not positive definite")]
    SingularSigma,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("covariance matrix is not positive semi-definite")]
    NonPsd,

    #[error("p = {p} is not divisible by {k}")]
    Divisibility { p: usize, k: usize },

    #[error("signature mean must be positive, found {value} at gene {gene}")]
    NonPositiveMean { gene: usize, value: f64 },
}

impl Error {
    pub(crate) fn in_sample(self, sample_id: &str) -> Self {
        Error::Sample {
            sample_id: sample_id.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// The innermost error, with sample and iteration context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } | Error::Iteration { source, .. } => source.root(),
            other => other,
        }
    }
}
