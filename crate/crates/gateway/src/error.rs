use codesign_core::backend::BackendError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown project `{0}`")]
    UnknownProject(String),

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("session `{0}` has finished all its rounds")]
    SessionClosed(String),

    #[error("stale snapshot: client saw offset {expected}, log is at {actual}")]
    Stale { expected: u64, actual: u64 },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("event log corrupt at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },

    #[error(transparent)]
    Core(#[from] codesign_core::Error),

    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
}

impl From<BackendError> for GatewayError {
    fn from(e: BackendError) -> Self {
        GatewayError::Core(e.into())
    }
}

impl From<serde_json::Error> for GatewayError {
    fn from(e: serde_json::Error) -> Self {
        GatewayError::Invalid(e.to_string())
    }
}

/// Wire form of every error: `{code, message, details}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl GatewayError {
    /// HTTP status and stable machine-readable code.
    pub fn status_and_code(&self) -> (u16, &'static str) {
        use codesign_core::Error as E;
        match self {
            GatewayError::UnknownProject(_) => (404, "UNKNOWN_PROJECT"),
            GatewayError::UnknownSession(_) => (404, "UNKNOWN_SESSION"),
            GatewayError::SessionClosed(_) => (409, "SESSION_CLOSED"),
            GatewayError::Stale { .. } => (409, "STALE_SNAPSHOT"),
            GatewayError::Conflict(_) => (409, "CONFLICT"),
            GatewayError::Invalid(_) => (422, "VALIDATION_FAILED"),
            GatewayError::CorruptLog { .. } => (500, "CORRUPT_LOG"),
            GatewayError::Storage(_) => (500, "STORAGE"),
            GatewayError::Core(e) => match e {
                E::UnknownItem(_) => (404, "UNKNOWN_ITEM"),
                E::UnknownNode(_) => (404, "UNKNOWN_NODE"),
                E::UnknownDimension(_) | E::UnknownAttribute(_) => (404, "UNKNOWN_ATTRIBUTE"),
                E::AlreadyPruned(_) => (409, "ALREADY_PRUNED"),
                E::NotPruned(_) => (409, "NOT_PRUNED"),
                E::AlreadyDeleted(_) => (409, "ALREADY_DELETED"),
                E::NoCandidates => (409, "NO_CANDIDATES"),
                E::EmptyManifest => (422, "EMPTY_MANIFEST"),
                E::IncompleteSelection(_) => (422, "INCOMPLETE_SELECTION"),
                E::InvalidStrictness(_) => (422, "INVALID_STRICTNESS"),
                E::InvalidGarmentType(_) => (422, "INVALID_GARMENT_TYPE"),
                E::InvalidRegion(_) => (422, "INVALID_REGION"),
                E::InvalidProfile(_) => (422, "INVALID_PROFILE"),
                E::InvalidRank { .. } => (422, "INVALID_RANK"),
                E::Backend(BackendError::Unavailable(_)) => (503, "BACKEND_UNAVAILABLE"),
                E::Backend(_) => (502, "BACKEND_ERROR"),
                E::Io(_) => (500, "STORAGE"),
                _ => (422, "VALIDATION_FAILED"),
            },
        }
    }

    pub fn to_api(&self) -> ApiError {
        let (_, code) = self.status_and_code();
        let details = match self {
            GatewayError::Stale { expected, actual } => serde_json::json!({ "expected": expected, "actual": actual }),
            GatewayError::CorruptLog { seq, .. } => serde_json::json!({ "seq": seq }),
            _ => serde_json::Value::Object(Default::default()),
        };
        ApiError { code: code.to_string(), message: self.to_string(), details }
    }
}
