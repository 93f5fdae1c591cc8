use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input or a violated invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing {view} view for session {session}: {path}")]
    MissingView {
        session: String,
        view: String,
        path: PathBuf,
    },

    #[error("overlapping annotations in session {session}: [{a_start}, {a_end}) and [{b_start}, {b_end})")]
    OverlappingIntervals {
        session: String,
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },

    #[error("unknown class id {0}")]
    UnknownClass(i64),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: store holds {expected}-dim vectors, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate key {0}")]
    DuplicateKey(String),

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("encoder initialization failed: {0}")]
    EncoderInit(String),

    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr:e}): loss is {loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    #[error("missing embeddings for sessions: {0:?}")]
    MissingEmbeddings(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Errors caused by bad inputs or configuration rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::MissingView { .. }
                | Error::OverlappingIntervals { .. }
                | Error::UnknownClass(_)
                | Error::Config(_)
                | Error::Shape(_)
                | Error::Input(_)
                | Error::DimMismatch { .. }
                | Error::DuplicateKey(_)
                | Error::Csv(_)
        )
    }
}

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: context(),
            source,
        })
    }
}
