use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error classes shared by every stage of the pipeline.
///
/// The CLI maps these onto process exit codes, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented invariant. `field` names the offending
    /// field or axis.
    #[error("validation error in {field}: {message}")]
    Validation { field: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Stratified splitting is impossible for the given labels.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// A model was used before it was trained or loaded.
    #[error("state error: {0}")]
    State(String),

    /// An upstream stage artifact is missing.
    #[error("dependency error: stage `{stage}` has not produced its artifact ({detail})")]
    Dependency { stage: String, detail: String },

    /// NaN/Inf or divergence during computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported query: {0}")]
    Unsupported(String),

    #[error("failed to load {}: {message}", path.display())]
    Load { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dependency(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dependency {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 validation, 3 dependency, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. }
            | Error::Config(_)
            | Error::Stratification(_)
            | Error::Load { .. } => 2,
            Error::Dependency { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

/// Fails with [`Error::Numerical`] unless every value is finite.
pub(crate) fn ensure_finite(what: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        ))),
    }
}
