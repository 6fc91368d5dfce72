use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} is outside [0, {num_classes}) and is not the ignore index")]
    InvalidLabel { label: u8, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("the evaluation set is empty")]
    EmptyEvaluation,

    #[error("requested {requested} classes but the palette only has {available}")]
    PaletteExhausted { requested: usize, available: usize },

    #[error("checkpoint config hash {found} does not match the run config hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown ablation key `{0}`")]
    UnknownGridKey(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Errors caused by the user's configuration or flags rather than by a
    /// failure during compute.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownGridKey(_)
                | Error::TomlDe(_)
                | Error::PaletteExhausted { .. }
                | Error::ConfigHashMismatch { .. }
        )
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}
