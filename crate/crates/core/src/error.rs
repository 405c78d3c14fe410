use rvekit_nn::NnError;
use thiserror::Error;

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
            Category::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("unsatisfiable inclusion spec after {attempts} attempts: {reason}")]
    Unsatisfiable { attempts: usize, reason: String },

    #[error("solver did not converge in {iterations} iterations (relative residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn category(&self) -> Category {
        match self {
            CoreError::Config(_) | CoreError::Unsatisfiable { .. } => Category::Config,
            CoreError::Data(_) | CoreError::Json(_) => Category::Data,
            CoreError::Numeric(_) | CoreError::NonConvergence { .. } => Category::Numeric,
            CoreError::Io(_) => Category::Io,
            CoreError::Nn(e) => match e {
                NnError::Io(_) => Category::Io,
                NnError::Config(_) => Category::Config,
                NnError::Shape { .. } => Category::Config,
                _ => Category::Data,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> CoreError {
    CoreError::Data(msg.into())
}
