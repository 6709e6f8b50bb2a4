//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. Variants are
//! deliberately fine grained so that callers (and the command line front end)
//! can map each failure class to a distinct exit path, and so that tests can
//! assert on the exact failure rather than on message substrings alone.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation that needs at least one element was given none.
    #[error("empty input")]
    EmptyInput,

    /// Two tensors (or a tensor and an expected geometry) disagree in shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric operation produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A class index does not fit the model's output width.
    #[error("class index {index} out of range for {count} classes")]
    ClassOutOfRange { index: usize, count: usize },

    /// No weight-gradient row of the final fully connected layer has a
    /// strictly negative sum, so the ground-truth class cannot be read off.
    #[error("label not identifiable")]
    LabelNotIdentifiable,

    /// Cosine distance was requested for a zero-magnitude vector.
    #[error("undefined cosine")]
    UndefinedCosine,

    /// The latent vector has zero component variance, so the moment-based
    /// prior term is undefined.
    #[error("degenerate latent")]
    DegenerateLatent,

    /// The file does not start with the weight-container magic.
    #[error("not a weight container")]
    NotAWeightContainer,

    /// The file does not start with the gradient-container magic.
    #[error("not a gradient container")]
    NotAGradientContainer,

    /// The container declares a format version this build does not speak.
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    /// The byte stream ended before the declared content was complete.
    #[error("unexpected end of container")]
    UnexpectedEnd,

    /// The trailing checksum does not match the container body.
    #[error("container checksum mismatch")]
    ChecksumMismatch,

    /// A layer name was looked up that the model does not define.
    #[error("layer not found: {0}")]
    LayerNotFound(String),

    /// The gradient share references a different model than the one supplied.
    #[error("model mismatch: share references {share_model}, supplied model is {local_model}")]
    ModelMismatch {
        share_model: String,
        local_model: String,
    },

    /// An objective function returned NaN or infinity for a candidate.
    #[error("objective returned a non-finite value for candidate {index}")]
    NonFiniteObjective { index: usize },

    /// The surrogate model's kernel matrix stayed singular through all
    /// jitter retries.
    #[error("surrogate fit is singular")]
    SurrogateSingular,

    /// A configuration document failed validation. `message` is the full
    /// human-readable sentence and already names the offending field;
    /// `path` carries the dotted field path alone for programmatic use.
    #[error("config error: {message}")]
    Config { path: String, message: String },

    /// Image file parsing or encoding failed.
    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier for the failure class. The command line tool
    /// prints this next to the human-readable message so scripts can branch
    /// on it without parsing prose.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty-input",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::ClassOutOfRange { .. } => "class-out-of-range",
            Error::LabelNotIdentifiable => "label-not-identifiable",
            Error::UndefinedCosine => "undefined-cosine",
            Error::DegenerateLatent => "degenerate-latent",
            Error::NotAWeightContainer => "not-a-weight-container",
            Error::NotAGradientContainer => "not-a-gradient-container",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::UnexpectedEnd => "unexpected-end",
            Error::ChecksumMismatch => "checksum-mismatch",
            Error::LayerNotFound(_) => "layer-not-found",
            Error::ModelMismatch { .. } => "model-mismatch",
            Error::NonFiniteObjective { .. } => "non-finite-objective",
            Error::SurrogateSingular => "surrogate-singular",
            Error::Config { .. } => "config",
            Error::ImageFormat(_) => "image-format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad user input (malformed files, invalid
    /// configuration) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite(_)
                | Error::NonFiniteObjective { .. }
                | Error::SurrogateSingular
                | Error::Io(_)
        )
    }
}
