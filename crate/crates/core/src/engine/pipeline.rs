use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backends::{
    BackendSuite, CaptionRequest, ImageView, ObjectBox, PartSegmentRequest, PartVocabulary, ScoreRequest,
    SegmentRequest,
};
use super::bbox::{normalize_bbox, part_caption, BBox, NormalizedBBox};
use super::EngineError;
use crate::mask::{rle_encode, RleMask};

/// Strict lower bound on image-text similarity for a record to be kept.
pub const SIMILARITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordGranularity {
    Image,
    Object,
    Part,
}

impl RecordGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordGranularity::Image => "image",
            RecordGranularity::Object => "object",
            RecordGranularity::Part => "part",
        }
    }
}

/// One box-caption(-mask) pair produced by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingRecord {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub granularity: RecordGranularity,
    pub bbox: BBox,
    pub norm_bbox: NormalizedBBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    pub caption: String,
    pub object_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl GroundingRecord {
    /// Whole-image caption record.
    pub fn image_level(image_ref: &str, width: usize, height: usize, caption: &str) -> Self {
        Self {
            image_ref: image_ref.to_string(),
            granularity: RecordGranularity::Image,
            bbox: BBox::full(width, height),
            norm_bbox: NormalizedBBox::FULL,
            mask: None,
            caption: caption.to_string(),
            object_category: "image".into(),
            part_category: None,
            similarity: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.norm_bbox.is_valid() {
            return Err(format!("normalized box {} out of range", self.norm_bbox));
        }
        if self.granularity == RecordGranularity::Image && self.norm_bbox != NormalizedBBox::FULL {
            return Err("image-level record must span (0,0,999,999)".into());
        }
        match (self.granularity, &self.part_category) {
            (RecordGranularity::Part, None) => return Err("part record without part_category".into()),
            (RecordGranularity::Part, Some(p)) if p.is_empty() => return Err("empty part_category".into()),
            _ => {}
        }
        if let Some(s) = self.similarity {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("similarity {s} outside [0, 1]"));
            }
        }
        if let Some(m) = &self.mask {
            m.validate().map_err(|e| e.to_string())?;
        }
        if self.caption.is_empty() {
            return Err("empty caption".into());
        }
        Ok(())
    }
}

/// A candidate that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub granularity: RecordGranularity,
    pub object_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    /// Backend or check that failed.
    pub stage: String,
    pub error: String,
}

pub type Candidate = Result<GroundingRecord, FailedRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    BelowThreshold,
    ScorerError,
    InvalidBox,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::BelowThreshold => "below_threshold",
            DropReason::ScorerError => "scorer_error",
            DropReason::InvalidBox => "invalid_box",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub record: GroundingRecord,
    pub reason: DropReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// An image to process with its annotated object boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineInput {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub objects: Vec<ObjectBox>,
}

/// Reads a JSON-lines image manifest. Image paths are resolved against the
/// manifest's directory by [`run_engine`].
pub fn load_manifest(path: &Path) -> Result<Vec<EngineInput>, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EngineError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn failed(
    image: ImageView<'_>,
    granularity: RecordGranularity,
    object: &str,
    part: Option<&str>,
    bbox: Option<BBox>,
    stage: &str,
    error: impl ToString,
) -> FailedRecord {
    FailedRecord {
        image_ref: image.image_ref.to_string(),
        granularity,
        object_category: object.to_string(),
        part_category: part.map(String::from),
        bbox,
        stage: stage.to_string(),
        error: error.to_string(),
    }
}

/// One object record per box: mask from the promptable segmenter and
/// caption from the captioner on the normalized box, queried independently.
pub fn object_branch(image: ImageView<'_>, boxes: &[ObjectBox], backends: &BackendSuite) -> Vec<Candidate> {
    let (w, h) = (image.image.width() as usize, image.image.height() as usize);
    boxes
        .iter()
        .map(|ob| {
            let fail = |stage: &str, e: &dyn ToString| {
                failed(image, RecordGranularity::Object, &ob.category, None, Some(ob.bbox), stage, e.to_string())
            };
            let norm = normalize_bbox(&ob.bbox, w, h).map_err(|e| fail("bbox", &e))?;
            let seg = backends.promptable_segmenter.segment(
                image,
                &SegmentRequest {
                    bbox: ob.bbox,
                    category: ob.category.clone(),
                },
            );
            let cap = backends.captioner.caption(
                image,
                &CaptionRequest {
                    norm_bbox: norm,
                    category: ob.category.clone(),
                    prompt: None,
                },
            );
            let mask = seg.map_err(|e| fail("promptable_segmenter", &e))?;
            let caption = cap.map_err(|e| fail("captioner", &e))?;
            Ok(GroundingRecord {
                image_ref: image.image_ref.to_string(),
                granularity: RecordGranularity::Object,
                bbox: ob.bbox,
                norm_bbox: norm,
                mask: Some(rle_encode(&mask)),
                caption,
                object_category: ob.category.clone(),
                part_category: None,
                similarity: None,
            })
        })
        .collect()
}

/// Decomposes the image's object categories into a part vocabulary, runs
/// the part segmenter and captions every part box. A decomposer or part
/// segmenter failure yields a single failed record for the image.
pub fn part_branch(
    image: ImageView<'_>,
    objects: &[ObjectBox],
    backends: &BackendSuite,
) -> Result<(PartVocabulary, Vec<Candidate>), FailedRecord> {
    let (w, h) = (image.image.width() as usize, image.image.height() as usize);
    let mut categories: Vec<String> = Vec::new();
    for o in objects {
        if !categories.contains(&o.category) {
            categories.push(o.category.clone());
        }
    }
    if categories.is_empty() {
        return Ok((PartVocabulary::default(), Vec::new()));
    }
    let whole = |stage: &str, e: &dyn ToString| {
        failed(image, RecordGranularity::Part, &categories.join(","), None, None, stage, e.to_string())
    };
    let table = backends.decomposer.decompose(&categories).map_err(|e| whole("decomposer", &e))?;
    let vocabulary = PartVocabulary::from_table(&categories, &table);
    if vocabulary.entries.is_empty() {
        return Ok((vocabulary, Vec::new()));
    }
    let proposals = backends
        .part_segmenter
        .segment_parts(
            image,
            &PartSegmentRequest {
                vocabulary: vocabulary.clone(),
                objects: objects.to_vec(),
            },
        )
        .map_err(|e| whole("part_segmenter", &e))?;
    let candidates = proposals
        .into_iter()
        .map(|p| {
            let fail = |stage: &str, e: &dyn ToString| {
                failed(image, RecordGranularity::Part, &p.object, Some(&p.part), Some(p.bbox), stage, e.to_string())
            };
            let norm = normalize_bbox(&p.bbox, w, h).map_err(|e| fail("bbox", &e))?;
            let prompt = part_caption(&p.part, &p.object).map_err(|e| fail("part_caption", &e))?;
            let caption = backends
                .captioner
                .caption(
                    image,
                    &CaptionRequest {
                        norm_bbox: norm,
                        category: p.object.clone(),
                        prompt: Some(prompt),
                    },
                )
                .map_err(|e| fail("captioner", &e))?;
            Ok(GroundingRecord {
                image_ref: image.image_ref.to_string(),
                granularity: RecordGranularity::Part,
                bbox: p.bbox,
                norm_bbox: norm,
                mask: Some(rle_encode(&p.mask)),
                caption,
                object_category: p.object.clone(),
                part_category: Some(p.part.clone()),
                similarity: None,
            })
        })
        .collect();
    Ok((vocabulary, candidates))
}

/// The pixels covered by `bbox`, or `None` when that region is empty.
pub fn crop(image: &RgbImage, bbox: &BBox) -> Option<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (x0, y0, x1, y1) = bbox.pixel_span(w, h);
    if x1 <= x0 || y1 <= y0 || bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return None;
    }
    Some(image::imageops::crop_imm(image, x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32).to_image())
}

/// Scores every record on its crop and keeps those strictly above the
/// threshold. Every record comes back annotated with its score when one
/// was obtained.
pub fn filter_records(
    image: ImageView<'_>,
    records: Vec<GroundingRecord>,
    backends: &BackendSuite,
) -> (Vec<GroundingRecord>, Vec<DroppedRecord>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for mut rec in records {
        let Some(region) = crop(image.image, &rec.bbox) else {
            dropped.push(DroppedRecord {
                record: rec,
                reason: DropReason::InvalidBox,
                detail: Some("zero-area crop".into()),
            });
            continue;
        };
        let req = ScoreRequest {
            bbox: rec.bbox,
            caption: rec.caption.clone(),
        };
        match backends.scorer.score(image, &region, &req) {
            Ok(s) if s.is_finite() && (0.0..=1.0).contains(&s) => {
                rec.similarity = Some(s);
                if s > SIMILARITY_THRESHOLD {
                    kept.push(rec);
                } else {
                    dropped.push(DroppedRecord {
                        record: rec,
                        reason: DropReason::BelowThreshold,
                        detail: None,
                    });
                }
            }
            Ok(s) => dropped.push(DroppedRecord {
                record: rec,
                reason: DropReason::ScorerError,
                detail: Some(format!("score {s} outside [0, 1]")),
            }),
            Err(e) => dropped.push(DroppedRecord {
                record: rec,
                reason: DropReason::ScorerError,
                detail: Some(e.to_string()),
            }),
        }
    }
    (kept, dropped)
}

/// Everything the engine produced for one image.
#[derive(Debug, Clone, Default)]
pub struct ImageOutcome {
    pub image_ref: String,
    pub kept: Vec<GroundingRecord>,
    pub dropped: Vec<DroppedRecord>,
    pub failed: Vec<FailedRecord>,
    pub object_candidates: usize,
    pub part_candidates: usize,
    /// Set when the image itself could not be processed.
    pub image_error: Option<String>,
}

/// Counters over a whole run. All maps are keyed in sorted order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineReport {
    pub images_total: usize,
    pub images_failed: usize,
    /// Candidates produced per granularity, before filtering.
    pub candidates: BTreeMap<String, usize>,
    /// Candidates that failed per stage.
    pub failed: BTreeMap<String, usize>,
    pub kept: BTreeMap<String, usize>,
    pub dropped: BTreeMap<String, usize>,
    pub total_kept: usize,
    pub total_dropped: usize,
    pub total_failed: usize,
}

impl EngineReport {
    pub fn absorb(&mut self, o: &ImageOutcome) {
        self.images_total += 1;
        if o.image_error.is_some() {
            self.images_failed += 1;
        }
        *self.candidates.entry("object".into()).or_default() += o.object_candidates;
        *self.candidates.entry("part".into()).or_default() += o.part_candidates;
        for f in &o.failed {
            *self.failed.entry(f.stage.clone()).or_default() += 1;
        }
        for r in &o.kept {
            *self.kept.entry(r.granularity.as_str().into()).or_default() += 1;
        }
        for d in &o.dropped {
            *self.dropped.entry(d.reason.as_str().into()).or_default() += 1;
        }
        self.total_kept += o.kept.len();
        self.total_dropped += o.dropped.len();
        self.total_failed += o.failed.len();
    }
}

/// Object branch, part branch and filtering for one image.
pub fn process_image(input: &EngineInput, base: &Path, backends: &BackendSuite) -> ImageOutcome {
    let mut out = ImageOutcome {
        image_ref: input.image.clone(),
        ..Default::default()
    };
    let path = base.join(&input.image);
    let image = match image::open(&path) {
        Ok(img) => img.to_rgb8(),
        Err(e) => {
            out.image_error = Some(format!("{}: {e}", path.display()));
            return out;
        }
    };
    let dims = (image.width() as usize, image.height() as usize);
    if input.width.is_some_and(|w| w != dims.0) || input.height.is_some_and(|h| h != dims.1) {
        out.image_error = Some(format!("declared size does not match the {}x{} file", dims.0, dims.1));
        return out;
    }
    let view = ImageView {
        image_ref: &input.image,
        path: &path,
        image: &image,
    };
    let mut complete = Vec::new();
    let objects = object_branch(view, &input.objects, backends);
    out.object_candidates = objects.len();
    for c in objects {
        match c {
            Ok(r) => complete.push(r),
            Err(f) => out.failed.push(f),
        }
    }
    match part_branch(view, &input.objects, backends) {
        Ok((_, parts)) => {
            out.part_candidates = parts.len();
            for c in parts {
                match c {
                    Ok(r) => complete.push(r),
                    Err(f) => out.failed.push(f),
                }
            }
        }
        Err(f) => out.failed.push(f),
    }
    let (kept, dropped) = filter_records(view, complete, backends);
    out.kept = kept;
    out.dropped = dropped;
    out
}

/// Where the engine writes its streams.
pub struct EngineSink<'a> {
    pub kept: &'a mut dyn Write,
    pub dropped: Option<&'a mut dyn Write>,
    pub failed: Option<&'a mut dyn Write>,
}

fn write_line(w: &mut dyn Write, value: &impl Serialize) -> Result<(), EngineError> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|source| EngineError::Io {
        path: "<sink>".into(),
        source,
    })
}

/// Processes images concurrently and streams results in input order, so
/// output is identical across runs.
pub fn run_engine(
    inputs: &[EngineInput],
    base: &Path,
    backends: &BackendSuite,
    sink: &mut EngineSink<'_>,
) -> Result<EngineReport, EngineError> {
    let outcomes: Vec<ImageOutcome> = inputs.par_iter().map(|i| process_image(i, base, backends)).collect();
    let mut report = EngineReport::default();
    for o in &outcomes {
        for r in &o.kept {
            r.validate().map_err(|e| EngineError::InvalidRecord(format!("{}: {e}", r.image_ref)))?;
            write_line(sink.kept, r)?;
        }
        if let Some(w) = sink.dropped.as_deref_mut() {
            for d in &o.dropped {
                write_line(w, d)?;
            }
        }
        if let Some(w) = sink.failed.as_deref_mut() {
            for f in &o.failed {
                write_line(w, f)?;
            }
            if let Some(e) = &o.image_error {
                write_line(
                    w,
                    &serde_json::json!({"image": o.image_ref, "stage": "image", "error": e}),
                )?;
            }
        }
        report.absorb(o);
    }
    Ok(report)
}

/// Base directory for manifest-relative image paths.
pub fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}
