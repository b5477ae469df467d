use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity showed up in a graph node.
    #[error("numeric failure at node {node} ({op}): {detail}")]
    NumericNode {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// A NaN or infinity showed up in a named pipeline stage.
    #[error("numeric failure in {stage}: {detail}")]
    NumericStage { stage: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
