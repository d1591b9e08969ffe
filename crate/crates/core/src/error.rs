use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset root does not exist: {0}")]
    MissingRoot(PathBuf),

    #[error("no images found under {0}")]
    NoImages(PathBuf),

    #[error("{} file(s) do not match the naming rule: {}", .0.len(), fmt_paths(.0))]
    NamingRule(Vec<PathBuf>),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("infeasible split targets: {0}")]
    InfeasibleSplit(String),

    #[error("patient {0} has no split assignment")]
    Unassigned(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown backbone '{id}'; available: {available}")]
    UnknownBackbone { id: String, available: String },

    #[error("pretrained weights for '{id}' not found ({reason}). {hint}")]
    MissingWeights { id: String, reason: String, hint: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("no attention available: {0}")]
    NoAttention(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown ablation variant '{0}' (expected one of: no-augmentation, no-attention, no-focal-loss)")]
    UnknownVariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn fmt_paths(paths: &[PathBuf]) -> String {
    const SHOWN: usize = 10;
    let mut s = paths
        .iter()
        .take(SHOWN)
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if paths.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", paths.len() - SHOWN));
    }
    s
}
