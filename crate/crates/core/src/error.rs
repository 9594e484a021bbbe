use thiserror::Error;

pub type Result<T> = std::result::Result<T, OreoError>;

#[derive(Debug, Error)]
pub enum OreoError {
    /// An action or token that the MDP does not allow in the given state.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation precondition (terminal source state,
    /// missing table entry, mismatched action sets, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// The reference policy puts zero mass on an action that was taken.
    #[error("unsupported support: {0}")]
    UnsupportedSupport(String),

    /// Enumeration or state-space cap exceeded.
    #[error("resource error: {0}")]
    Resource(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error at state [{state}]: {detail}")]
    Numerical { state: String, detail: String },

    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OreoError {
    /// Short machine-readable tag, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            OreoError::Domain(_) => "domain",
            OreoError::Contract(_) => "contract",
            OreoError::UnsupportedSupport(_) => "unsupported-support",
            OreoError::Resource(_) => "resource",
            OreoError::Config(_) => "config",
            OreoError::Numerical { .. } => "numerical",
            OreoError::Training { .. } => "training",
            OreoError::Parse(_) => "parse",
            OreoError::Io(_) => "io",
            OreoError::Json(_) => "parse",
        }
    }
}
