use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    /// Shape mismatch, tagged with the path of the offending layer (e.g. `3` or `2/branch1/0`).
    #[error("layer {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid layer configuration: {0}")]
    Config(String),

    #[error("checkpoint topology mismatch: {0}")]
    Topology(String),

    #[error("checkpoint content hash mismatch (expected {expected}, found {found})")]
    Hash { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NnError {
    pub(crate) fn shape(layer: impl ToString, message: impl Into<String>) -> Self {
        NnError::Shape {
            layer: layer.to_string(),
            message: message.into(),
        }
    }

    /// Prefixes the layer path of a shape error with the index of the enclosing layer.
    pub(crate) fn nest(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            NnError::Shape { layer, message } => NnError::Shape {
                layer: if layer.is_empty() {
                    prefix.to_string()
                } else {
                    format!("{prefix}/{layer}")
                },
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
