use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("a tensor shape must have at least one dimension")]
    EmptyShape,

    #[error("shape {shape:?} has a zero dimension")]
    ZeroDim { shape: Vec<usize> },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("layer {index} ({kind}): {message}")]
    InvalidLayer {
        index: usize,
        kind: String,
        message: String,
    },

    #[error("layers {first} ({first_kind}) and {second} ({second_kind}) do not chain: {message}")]
    ShapeChain {
        first: usize,
        first_kind: String,
        second: usize,
        second_kind: String,
        message: String,
    },

    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target probability {value} outside [0, 1]")]
    TargetOutOfRange { value: f64 },

    #[error("attribute class '{0}' has no training images")]
    EmptyClass(String),

    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in layer {layer} ({kind}) at epoch {epoch}, iteration {iteration}")]
    NonFiniteGradient {
        layer: usize,
        kind: String,
        epoch: usize,
        iteration: usize,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: String, message: String },

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    /// Wraps an io::Error with the path or action that produced it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
