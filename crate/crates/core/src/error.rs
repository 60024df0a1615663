use sonorl_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SonoError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class coverage: {0}")]
    Coverage(String),

    #[error("need at least {need} samples, got {got}")]
    SampleSize { need: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("loss `{0}` is not finite")]
    PoisonedLoss(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, SonoError>;
