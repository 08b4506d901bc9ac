use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("refusing to truncate: target length {target} < current length {current}")]
    TruncationRefused { target: usize, current: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("pixel value {value} outside [0, 1]")]
    Range { value: f64 },
    #[error("audio duration {measured_s:.4} s, expected {expected_s:.4} s (tolerance {tolerance_s:.4} s)")]
    Duration {
        measured_s: f64,
        expected_s: f64,
        tolerance_s: f64,
    },
    #[error("unknown key `{0}`")]
    Key(String),
    #[error("attention row has no unmasked key")]
    DegenerateAttention,
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("media error: {0}")]
    Media(String),
    #[error("training diverged at step {step}: l_video={l_video}, l_audio={l_audio}, grad_norm={grad_norm}")]
    NumericAbort {
        step: usize,
        l_video: f64,
        l_audio: f64,
        grad_norm: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] stfm_tensor::TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Media(e.to_string())
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        Error::Media(e.to_string())
    }
}
