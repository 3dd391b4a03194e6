//! Grounding-data engine: object boxes become captioned masks, object
//! categories become part vocabularies and part masks, and an image-text
//! scorer filters the results. Every model in the loop sits behind a
//! backend interface.

mod backends;
mod bbox;
mod external;
mod pipeline;

use thiserror::Error;

pub use backends::{
    BackendError, BackendRole, BackendSpec, BackendSuite, BackendsConfig, CaptionRequest, Captioner, Decomposer,
    ImageView, ObjectBox, PartEntry, PartProposal, PartSegmentRequest, PartSegmenter, PartVocabulary,
    PromptableSegmenter, ScoreRequest, Scorer, SegmentRequest, StubCaptioner, StubDecomposer, StubPartSegmenter,
    StubScorer, StubSegmenter,
};
pub use bbox::{normalize_bbox, part_caption, BBox, NormalizedBBox, NORM_MAX};
pub use external::{serve, ExternalBackend};
pub use pipeline::{
    crop, filter_records, load_manifest, manifest_base, object_branch, part_branch, process_image, run_engine,
    Candidate, DropReason, DroppedRecord, EngineInput, EngineReport, EngineSink, FailedRecord, GroundingRecord,
    ImageOutcome, RecordGranularity, SIMILARITY_THRESHOLD,
};

/// Published JSON Schema of one kept [`GroundingRecord`] line.
pub const RECORD_SCHEMA: &str = include_str!("../../schemas/grounding_record.schema.json");

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("part and object names must be non-empty")]
    EmptyName,
    #[error("no backend configured for `{0}`")]
    MissingBackend(String),
    #[error("engine config: {0}")]
    Config(String),
    #[error("record failed validation: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
