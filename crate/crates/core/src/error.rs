use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design space schema invalid: {0}")]
    Schema(String),

    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("`{0}` is not a garment type")]
    InvalidGarmentType(String),

    #[error("strictness {0} outside [0, 1]")]
    InvalidStrictness(f64),

    #[error("informed prompt requires at least one detail entry")]
    MissingDetail,

    #[error("invalid brush region: {0}")]
    InvalidRegion(String),

    #[error("invalid user profile: {0}")]
    InvalidProfile(String),

    #[error("invalid interaction: {0}")]
    InvalidInteraction(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("item `{0}` is already deleted")]
    AlreadyDeleted(String),

    #[error("rank {rank} out of range for {len} visible items")]
    InvalidRank { rank: usize, len: usize },

    #[error("invalid visual embedding: {0}")]
    InvalidEmbedding(String),

    #[error("training batch is empty")]
    EmptyBatch,

    #[error("no candidate items left to recommend")]
    NoCandidates,

    #[error("unknown tree node `{0}`")]
    UnknownNode(String),

    #[error("node `{0}` is already pruned")]
    AlreadyPruned(String),

    #[error("node `{0}` is not pruned")]
    NotPruned(String),

    #[error("no qualifying garments for a fine-tune manifest")]
    EmptyManifest,

    #[error("puzzle selection is incomplete: {0} of 9 dimensions filled")]
    IncompleteSelection(usize),

    #[error("checkpoint malformed: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
