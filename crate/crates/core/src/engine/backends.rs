//! Backend interfaces, the request/response vocabulary they share with the
//! external-process protocol, and deterministic in-repo stubs.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bbox::{BBox, NormalizedBBox};
use super::external::ExternalBackend;
use super::EngineError;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Which slot of the suite a backend fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Captioner,
    PromptableSegmenter,
    PartSegmenter,
    Decomposer,
    Scorer,
}

impl BackendRole {
    pub const ALL: [BackendRole; 5] = [
        BackendRole::Captioner,
        BackendRole::PromptableSegmenter,
        BackendRole::PartSegmenter,
        BackendRole::Decomposer,
        BackendRole::Scorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Captioner => "captioner",
            BackendRole::PromptableSegmenter => "promptable_segmenter",
            BackendRole::PartSegmenter => "part_segmenter",
            BackendRole::Decomposer => "decomposer",
            BackendRole::Scorer => "scorer",
        }
    }
}

impl std::str::FromStr for BackendRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackendRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown backend role `{s}`"))
    }
}

/// The image a request refers to.
#[derive(Clone, Copy)]
pub struct ImageView<'a> {
    pub image_ref: &'a str,
    pub path: &'a Path,
    pub image: &'a RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub norm_bbox: NormalizedBBox,
    /// Category of the boxed entity, as annotated upstream.
    pub category: String,
    /// Templated part phrase for part-level regions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub bbox: BBox,
    pub category: String,
}

/// Part names with the object categories they were decomposed from.
/// Entries are unique by part name, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartVocabulary {
    pub entries: Vec<PartEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartEntry {
    pub part: String,
    pub objects: Vec<String>,
}

impl PartVocabulary {
    /// Merges per-category part lists, visiting categories in `order`.
    pub fn from_table(order: &[String], table: &BTreeMap<String, Vec<String>>) -> Self {
        let mut vocab = PartVocabulary::default();
        for cat in order {
            for part in table.get(cat).into_iter().flatten() {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                match vocab.entries.iter_mut().find(|e| e.part == part) {
                    Some(e) => {
                        if !e.objects.contains(cat) {
                            e.objects.push(cat.clone());
                        }
                    }
                    None => vocab.entries.push(PartEntry {
                        part: part.to_string(),
                        objects: vec![cat.clone()],
                    }),
                }
            }
        }
        vocab
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.part.as_str()).collect()
    }

    /// Parts of `object`, in vocabulary order.
    pub fn parts_of(&self, object: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.objects.iter().any(|o| o == object))
            .map(|e| e.part.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub bbox: BBox,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSegmentRequest {
    pub vocabulary: PartVocabulary,
    /// Annotated objects in the image, as localisation context.
    pub objects: Vec<ObjectBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartProposal {
    pub part: String,
    pub object: String,
    pub mask: BinaryMask,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub bbox: BBox,
    pub caption: String,
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: ImageView<'_>, req: &CaptionRequest) -> Result<String, BackendError>;
}

pub trait PromptableSegmenter: Send + Sync {
    fn segment(&self, image: ImageView<'_>, req: &SegmentRequest) -> Result<BinaryMask, BackendError>;
}

pub trait PartSegmenter: Send + Sync {
    fn segment_parts(&self, image: ImageView<'_>, req: &PartSegmentRequest) -> Result<Vec<PartProposal>, BackendError>;
}

pub trait Decomposer: Send + Sync {
    /// Candidate part names per category.
    fn decompose(&self, categories: &[String]) -> Result<BTreeMap<String, Vec<String>>, BackendError>;
}

pub trait Scorer: Send + Sync {
    /// Image-text similarity in `[0, 1]` of a crop and a caption.
    fn score(&self, image: ImageView<'_>, crop: &RgbImage, req: &ScoreRequest) -> Result<f64, BackendError>;
}

/// Echoes `obj:<category>@<box>` or `part:<prompt>@<box>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubCaptioner {
    /// Categories whose requests fail.
    #[serde(default)]
    pub fail_on: Vec<String>,
}

impl Captioner for StubCaptioner {
    fn caption(&self, _image: ImageView<'_>, req: &CaptionRequest) -> Result<String, BackendError> {
        if self.fail_on.contains(&req.category) {
            return Err(BackendError(format!("stub captioner refuses `{}`", req.category)));
        }
        Ok(match &req.prompt {
            Some(p) => format!("part:{p}@{}", req.norm_bbox),
            None => format!("obj:{}@{}", req.category, req.norm_bbox),
        })
    }
}

fn box_mask(width: usize, height: usize, b: &BBox) -> Result<BinaryMask, BackendError> {
    BinaryMask::from_fn(width, height, |x, y| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        b.x0 <= cx && cx < b.x1 && b.y0 <= cy && cy < b.y1
    })
    .map_err(|e| BackendError(e.to_string()))
}

/// Fills the prompt box.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubSegmenter {
    #[serde(default)]
    pub fail_on: Vec<String>,
}

impl PromptableSegmenter for StubSegmenter {
    fn segment(&self, image: ImageView<'_>, req: &SegmentRequest) -> Result<BinaryMask, BackendError> {
        if self.fail_on.contains(&req.category) {
            return Err(BackendError(format!("stub segmenter refuses `{}`", req.category)));
        }
        box_mask(image.image.width() as usize, image.image.height() as usize, &req.bbox)
    }
}

/// Cuts each object box into equal horizontal bands, one per vocabulary
/// part of that object, top to bottom.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubPartSegmenter {
    #[serde(default)]
    pub fail_on: Vec<String>,
}

impl PartSegmenter for StubPartSegmenter {
    fn segment_parts(&self, image: ImageView<'_>, req: &PartSegmentRequest) -> Result<Vec<PartProposal>, BackendError> {
        let (w, h) = (image.image.width() as usize, image.image.height() as usize);
        let mut out = Vec::new();
        for obj in &req.objects {
            if self.fail_on.contains(&obj.category) {
                return Err(BackendError(format!("stub part segmenter refuses `{}`", obj.category)));
            }
            let parts = req.vocabulary.parts_of(&obj.category);
            let n = parts.len() as f64;
            for (i, part) in parts.into_iter().enumerate() {
                let b = obj.bbox;
                let band = BBox::new(
                    b.x0,
                    b.y0 + b.height() * i as f64 / n,
                    b.x1,
                    b.y0 + b.height() * (i + 1) as f64 / n,
                );
                out.push(PartProposal {
                    part: part.to_string(),
                    object: obj.category.clone(),
                    mask: box_mask(w, h, &band)?,
                    bbox: band,
                });
            }
        }
        Ok(out)
    }
}

/// Looks categories up in a fixed table; unknown categories have no parts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubDecomposer {
    #[serde(default)]
    pub table: BTreeMap<String, Vec<String>>,
}

impl Decomposer for StubDecomposer {
    fn decompose(&self, categories: &[String]) -> Result<BTreeMap<String, Vec<String>>, BackendError> {
        Ok(categories
            .iter()
            .map(|c| (c.clone(), self.table.get(c).cloned().unwrap_or_default()))
            .collect())
    }
}

/// Scores by caption lookup, falling back to a fixed value or, when none is
/// configured, to a SHA-256 digest of the caption and crop pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubScorer {
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    #[serde(default)]
    pub default: Option<f64>,
    /// Captions whose scoring fails.
    #[serde(default)]
    pub fail_on: Vec<String>,
}

impl Scorer for StubScorer {
    fn score(&self, _image: ImageView<'_>, crop: &RgbImage, req: &ScoreRequest) -> Result<f64, BackendError> {
        if self.fail_on.contains(&req.caption) {
            return Err(BackendError(format!("stub scorer refuses `{}`", req.caption)));
        }
        if let Some(&s) = self.overrides.get(&req.caption) {
            return Ok(s);
        }
        if let Some(s) = self.default {
            return Ok(s);
        }
        let mut hasher = Sha256::new();
        hasher.update(req.caption.as_bytes());
        hasher.update(crop.width().to_le_bytes());
        hasher.update(crop.height().to_le_bytes());
        hasher.update(crop.as_raw());
        let digest = hasher.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        Ok((u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// One entry of the backends config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Stub(#[serde(default)] serde_json::Map<String, serde_json::Value>),
    External {
        command: Vec<String>,
    },
}

/// The backends config file: one spec per role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub captioner: Option<BackendSpec>,
    pub promptable_segmenter: Option<BackendSpec>,
    pub part_segmenter: Option<BackendSpec>,
    pub decomposer: Option<BackendSpec>,
    pub scorer: Option<BackendSpec>,
}

impl BackendsConfig {
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, role: BackendRole) -> Option<&BackendSpec> {
        match role {
            BackendRole::Captioner => self.captioner.as_ref(),
            BackendRole::PromptableSegmenter => self.promptable_segmenter.as_ref(),
            BackendRole::PartSegmenter => self.part_segmenter.as_ref(),
            BackendRole::Decomposer => self.decomposer.as_ref(),
            BackendRole::Scorer => self.scorer.as_ref(),
        }
    }

    /// Roles without an entry, in canonical order.
    pub fn missing(&self) -> Vec<BackendRole> {
        BackendRole::ALL.into_iter().filter(|r| self.get(*r).is_none()).collect()
    }

    pub fn all_stubs() -> Self {
        let stub = || Some(BackendSpec::Stub(serde_json::Map::new()));
        Self {
            captioner: stub(),
            promptable_segmenter: stub(),
            part_segmenter: stub(),
            decomposer: stub(),
            scorer: stub(),
        }
    }
}

fn stub_from<T: serde::de::DeserializeOwned>(
    role: BackendRole,
    opts: &serde_json::Map<String, serde_json::Value>,
) -> Result<T, EngineError> {
    serde_json::from_value(serde_json::Value::Object(opts.clone()))
        .map_err(|e| EngineError::Config(format!("{} stub: {e}", role.as_str())))
}

/// All five backends, ready to run.
pub struct BackendSuite {
    pub captioner: Box<dyn Captioner>,
    pub promptable_segmenter: Box<dyn PromptableSegmenter>,
    pub part_segmenter: Box<dyn PartSegmenter>,
    pub decomposer: Box<dyn Decomposer>,
    pub scorer: Box<dyn Scorer>,
}

impl BackendSuite {
    /// Instantiates every role; fails with [`EngineError::MissingBackend`]
    /// naming the first role without an entry.
    pub fn from_config(config: &BackendsConfig) -> Result<Self, EngineError> {
        if let Some(role) = config.missing().first() {
            return Err(EngineError::MissingBackend(role.as_str().to_string()));
        }
        let spec = |role| config.get(role).expect("checked above");
        let external = |role: BackendRole, command: &[String]| ExternalBackend::spawn(role, command);
        macro_rules! build {
            ($role:expr, $stub:ty) => {
                match spec($role) {
                    BackendSpec::Stub(opts) => Box::new(stub_from::<$stub>($role, opts)?),
                    BackendSpec::External { command } => Box::new(external($role, command)?),
                }
            };
        }
        Ok(Self {
            captioner: build!(BackendRole::Captioner, StubCaptioner),
            promptable_segmenter: build!(BackendRole::PromptableSegmenter, StubSegmenter),
            part_segmenter: build!(BackendRole::PartSegmenter, StubPartSegmenter),
            decomposer: build!(BackendRole::Decomposer, StubDecomposer),
            scorer: build!(BackendRole::Scorer, StubScorer),
        })
    }

    /// Stub-only suite from the stub sections of `config`; external entries
    /// are rejected.
    pub fn stubs_only(config: &BackendsConfig) -> Result<Self, EngineError> {
        for role in BackendRole::ALL {
            if let Some(BackendSpec::External { .. }) = config.get(role) {
                return Err(EngineError::Config(format!("{} is not a stub", role.as_str())));
            }
        }
        Self::from_config(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(img: &RgbImage) -> ImageView<'_> {
        ImageView {
            image_ref: "x.png",
            path: Path::new("x.png"),
            image: img,
        }
    }

    #[test]
    fn vocabulary_echoes_table_and_dedups() {
        let table: BTreeMap<String, Vec<String>> = [
            ("dog".to_string(), vec!["head".into(), "leg".into(), "tail".into()]),
            ("cat".to_string(), vec!["head".into(), "ear".into()]),
        ]
        .into();
        let dogs = PartVocabulary::from_table(&["dog".into()], &table);
        assert_eq!(dogs.names(), vec!["head", "leg", "tail"]);
        let both = PartVocabulary::from_table(&["dog".into(), "cat".into()], &table);
        assert_eq!(both.names(), vec!["head", "leg", "tail", "ear"]);
        assert_eq!(both.parts_of("cat"), vec!["head", "ear"]);
    }

    #[test]
    fn stub_part_segmenter_bands() {
        let img = RgbImage::new(10, 10);
        let vocab = PartVocabulary {
            entries: vec![
                PartEntry {
                    part: "top".into(),
                    objects: vec!["box".into()],
                },
                PartEntry {
                    part: "bottom".into(),
                    objects: vec!["box".into()],
                },
            ],
        };
        let req = PartSegmentRequest {
            vocabulary: vocab,
            objects: vec![ObjectBox {
                bbox: BBox::new(2.0, 2.0, 6.0, 8.0),
                category: "box".into(),
            }],
        };
        let parts = StubPartSegmenter::default().segment_parts(view(&img), &req).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].mask.area(), 12);
        assert_eq!(parts[1].bbox, BBox::new(2.0, 5.0, 6.0, 8.0));
    }

    #[test]
    fn hash_scorer_is_deterministic_and_bounded() {
        let img = RgbImage::from_pixel(3, 3, image::Rgb([1, 2, 3]));
        let s = StubScorer::default();
        let req = ScoreRequest {
            bbox: BBox::full(3, 3),
            caption: "a".into(),
        };
        let a = s.score(view(&img), &img, &req).unwrap();
        assert_eq!(a, s.score(view(&img), &img, &req).unwrap());
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn missing_role_is_named() {
        let mut cfg = BackendsConfig::all_stubs();
        cfg.scorer = None;
        match BackendSuite::from_config(&cfg) {
            Err(EngineError::MissingBackend(name)) => assert_eq!(name, "scorer"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn config_parses_stub_options() {
        let cfg: BackendsConfig = serde_json::from_str(
            r#"{"captioner":{"kind":"stub"},"promptable_segmenter":{"kind":"stub","fail_on":["cat"]},
                "part_segmenter":{"kind":"stub"},"decomposer":{"kind":"stub","table":{"dog":["head"]}},
                "scorer":{"kind":"external","command":["python3","score.py"]}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.scorer, Some(BackendSpec::External { .. })));
        assert!(BackendSuite::stubs_only(&cfg).is_err());
        let bad: BackendsConfig =
            serde_json::from_str(r#"{"captioner":{"kind":"stub","nope":1}}"#).unwrap();
        assert!(matches!(BackendSuite::from_config(&BackendsConfig { captioner: bad.captioner, ..BackendsConfig::all_stubs() }), Err(EngineError::Config(_))));
    }
}
