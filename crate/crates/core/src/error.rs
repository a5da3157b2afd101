use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operator received inputs whose shapes it cannot combine.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An input outside the operator's mathematical domain (e.g. `log` of a non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor `{0}` is not recorded on the loss tape")]
    NotOnTape(String),

    #[error("tensors from different tapes were combined in {0}")]
    TapeMismatch(&'static str),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite objective value {value} while differencing `{param}`")]
    NonFinite { param: String, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient samples in domain `{domain}`: need {needed} of class {class}, have {have}")]
    InsufficientSamples { domain: String, class: u8, needed: usize, have: usize },

    #[error("score set must contain both classes (reals: {n_real}, fakes: {n_fake})")]
    SingleClass { n_real: usize, n_fake: usize },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
