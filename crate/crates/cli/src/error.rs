use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] sgdlab_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing files in bundle: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    /// Some runs diverged; their partial logs were written.
    #[error("{0} run(s) diverged")]
    Diverged(usize),
}

pub type Result<T> = std::result::Result<T, CliError>;
