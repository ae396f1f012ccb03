use thiserror::Error;

/// Error type shared across the library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape rule violated by a tensor op; the message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation contract (bad argument, wrong mode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Config file problem: unknown key, bad value, missing required key.
    #[error("config error: {0}")]
    Config(String),

    /// Corpus generation/loading problem.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint serialization/deserialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss component became non-finite; training aborts.
    #[error("non-finite loss in component '{component}' at step {step}")]
    NonFinite { component: &'static str, step: u64 },

    /// Evaluation setup problem (pool sizes, disjointness, empty label set).
    #[error("eval error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
