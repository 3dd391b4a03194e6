//! Referring-segmentation network, its configuration, checkpoints and
//! external weight import.

mod checkpoint;
mod config;
mod unires;

use thiserror::Error;

pub use checkpoint::{
    import_weights, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, ImportManifest, ImportReport,
    TensorRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, DEFAULT_HIGH_GROUP_TOKENS, DEFAULT_LOW_GROUP_TOKENS, IMAGE_CHANNELS};
pub use unires::{
    group_affinity, group_assignment, group_assignment_tempered, histogram_entropy, ForwardTrace, ForwardVars,
    GroupAssignment, GroupLevel, TextOutput, UniRes, VisualOutput,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("the {0:?} group-token bank is disabled in this config")]
    DisabledBank(GroupLevel),
    #[error("checkpoint config does not match the requested config: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
