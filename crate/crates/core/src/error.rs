use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `detail` names the offending dimension.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: degenerate output ({detail})")]
    DegenerateOutput { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any tensor that requires grad")]
    DetachedGraph,

    #[error("backward already ran on this tape; reset it before another pass")]
    BackwardTwice,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    Layer {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    /// Attaches a layer path to an error raised while propagating through it.
    pub fn at(self, path: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer { path: path.to_string(), source: Box::new(other) },
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DegenerateOutput { .. } => "degenerate_output",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::DetachedGraph => "detached_graph",
            Error::BackwardTwice => "backward_twice",
            Error::Config(_) => "config",
            Error::Incompatible(_) => "incompatible",
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Layer { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
