use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DgdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DgdError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged in {stage} at round {round}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        round: usize,
        loss: f64,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report error, missing artifacts: {}", .missing.join(", "))]
    Report { missing: Vec<String> },

    #[error("stage `{stage}` failed (artifacts: {}): {source}", display_paths(.artifacts))]
    Stage {
        stage: String,
        artifacts: Vec<PathBuf>,
        #[source]
        source: Box<DgdError>,
    },
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl DgdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DgdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        DgdError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 1 config, 2 stage failure, 3 io/format.
    pub fn exit_code(&self) -> i32 {
        match self {
            DgdError::Config(_) => 1,
            DgdError::Io { .. } | DgdError::Format { .. } => 3,
            DgdError::Stage { source, .. } => match source.as_ref() {
                DgdError::Config(_) => 1,
                DgdError::Io { .. } | DgdError::Format { .. } => 3,
                _ => 2,
            },
            _ => 2,
        }
    }
}
