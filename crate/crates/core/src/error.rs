use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("parse error at layer `{layer}`: {msg}")]
    Parse { layer: String, msg: String },

    #[error("malformed document: {0}")]
    Document(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite activation in layer `{0}`")]
    NonFinite(String),

    #[error("missing input for modality {0}")]
    MissingInput(usize),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
