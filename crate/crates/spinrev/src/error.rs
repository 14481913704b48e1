use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {detail}")]
    Validation { what: &'static str, detail: String },

    #[error("singular input: {0}")]
    SingularInput(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    #[error("voxel ({x}, {y}): {source}")]
    AtVoxel {
        x: usize,
        y: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("fidelity diverged at step {step} (loss {loss:.3e})")]
    Diverged { step: usize, loss: f64 },

    #[error("unsupported format version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("expected {expected} file, found {found}")]
    WrongKind { expected: String, found: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            what,
            detail: detail.into(),
        }
    }

    pub fn at_voxel(x: usize, y: usize, source: Error) -> Self {
        Error::AtVoxel {
            x,
            y,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
