use std::path::PathBuf;

/// Errors raised anywhere in the training and synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced in layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("diffusion step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },

    #[error("class id {class} outside 0..{classes}")]
    Class { class: usize, classes: usize },

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("cannot stratify class {class}: only {count} samples (need at least 3)")]
    Stratification { class: usize, count: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow { .. } | Error::Numeric(_) | Error::Divergence { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
