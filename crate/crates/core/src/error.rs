use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a type invariant or a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Targets leave no visible keypoint that matches a binding.
    #[error("unusable targets: no visible keypoint matches a binding")]
    NoMatchedPairs,

    #[error("non-finite gradient component: {parameter}")]
    NonFiniteGradient { parameter: String },

    #[error("optimizer diverged after {iterations} iterations (loss {loss:e}, initial {initial:e})")]
    Diverged {
        iterations: usize,
        loss: f64,
        initial: f64,
        report: Box<crate::align::OptimReport>,
    },

    #[error("missing attention cache for step {step}, pass {pass}, layer {layer}")]
    MissingCache {
        step: usize,
        pass: &'static str,
        layer: usize,
    },

    #[error("depth selection found no signal (all scores zero)")]
    NoSignal,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

impl Error {
    /// Stable short name for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Dimension(_) => "dimension_mismatch",
            Error::NoMatchedPairs => "no_matched_pairs",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::MissingCache { .. } => "missing_cache",
            Error::NoSignal => "no_signal",
            Error::Io { .. } => "io",
            Error::Json { .. } => "schema",
        }
    }
}
