use thiserror::Error;

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] dynrisk_core::Error),
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("{0}")]
    Conflict(String),
    #[error("model bundle was fit on a different dataset (bundle {expected}, data {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("unsupported bundle version {0}")]
    BundleVersion(u32),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
