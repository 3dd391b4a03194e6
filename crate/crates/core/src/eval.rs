//! Benchmark evaluation: per-sample IoU under the three granularity
//! settings, reported as JSON and as a fixed-width table.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    load_image, tokenize, BenchmarkSplit, DatasetError, EvalSetting, Granularity, ReferringSample, Vocabulary,
    WordVocab,
};
use crate::mask::{binarize, iou_stats, miou, oiou, rle_decode, BinaryMask, IoUStats, MaskError, RleMask};
use crate::model::{ModelError, UniRes};
use crate::nn::Scalar;

/// Published JSON Schema of [`EvalReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schemas/eval_report.schema.json");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("no prediction for sample `{0}`")]
    MissingPrediction(String),
    #[error("prediction for `{id}` is {got:?}, image is {want:?}")]
    PredictionSize {
        id: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("{path}: {message}")]
    Predictions { path: PathBuf, message: String },
}

/// Produces a binary mask for a benchmark sample at its image size.
pub trait Predictor: Sync {
    /// Identifier recorded in the report.
    fn id(&self) -> String;
    fn predict(&self, sample: &ReferringSample, root: &Path, threshold: f32) -> Result<BinaryMask, EvalError>;
}

/// Returns the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, sample: &ReferringSample, _root: &Path, _threshold: f32) -> Result<BinaryMask, EvalError> {
        Ok(sample.decode_mask()?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    sample_id: String,
    mask: RleMask,
}

/// Precomputed masks from a JSON-lines file of `{"sample_id", "mask"}`.
pub struct PredictionsPredictor {
    id: String,
    masks: HashMap<String, RleMask>,
}

impl PredictionsPredictor {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::Predictions {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut masks = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let p: PredictionLine = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            masks.insert(p.sample_id, p.mask);
        }
        Ok(Self {
            id: path.display().to_string(),
            masks,
        })
    }
}

impl Predictor for PredictionsPredictor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn predict(&self, sample: &ReferringSample, _root: &Path, _threshold: f32) -> Result<BinaryMask, EvalError> {
        let rle = self
            .masks
            .get(&sample.sample_id)
            .ok_or_else(|| EvalError::MissingPrediction(sample.sample_id.clone()))?;
        Ok(rle_decode(rle)?)
    }
}

/// Runs the network and binarizes its confidences.
pub struct ModelPredictor<T: Scalar> {
    pub model: UniRes<T>,
    pub vocab: WordVocab,
    pub id: String,
}

impl<T: Scalar> Predictor for ModelPredictor<T> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn predict(&self, sample: &ReferringSample, root: &Path, threshold: f32) -> Result<BinaryMask, EvalError> {
        let image = load_image(root, sample)?;
        let tokens = tokenize(&sample.expression, &self.vocab as &dyn Vocabulary, self.model.config().max_text_len)?;
        let (prob, _) = self.model.forward(&image, &tokens)?;
        Ok(binarize(&prob, threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    pub samples: usize,
    pub miou: f64,
    /// Reported for the object-only setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oiou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingsBlock {
    pub object_only: Option<SettingMetrics>,
    pub part_only: Option<SettingMetrics>,
    pub object_and_part: Option<SettingMetrics>,
}

impl SettingsBlock {
    pub fn get(&self, s: EvalSetting) -> Option<&SettingMetrics> {
        match s {
            EvalSetting::ObjectOnly => self.object_only.as_ref(),
            EvalSetting::PartOnly => self.part_only.as_ref(),
            EvalSetting::ObjectAndPart => self.object_and_part.as_ref(),
        }
    }

    fn slot(&mut self, s: EvalSetting) -> &mut Option<SettingMetrics> {
        match s {
            EvalSetting::ObjectOnly => &mut self.object_only,
            EvalSetting::PartOnly => &mut self.part_only,
            EvalSetting::ObjectAndPart => &mut self.object_and_part,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub object: usize,
    pub part: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub checkpoint: String,
    pub threshold: f32,
    pub settings: SettingsBlock,
    pub sample_counts: SampleCounts,
    pub wall_time_s: f64,
}

impl EvalReport {
    /// Fixed-width rendering, metrics to four decimals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "dataset {}  split {}  checkpoint {}  threshold {:.2}\n",
            self.dataset, self.split, self.checkpoint, self.threshold
        );
        out.push_str(&format!("{:<16} {:>8} {:>8} {:>8}\n", "setting", "samples", "mIoU", "oIoU"));
        for s in EvalSetting::ALL {
            let line = match self.settings.get(s) {
                Some(m) => format!(
                    "{:<16} {:>8} {:>8.4} {:>8}\n",
                    s.as_str(),
                    m.samples,
                    m.miou,
                    m.oiou.map_or("-".to_string(), |v| format!("{v:.4}"))
                ),
                None => format!("{:<16} {:>8} {:>8} {:>8}\n", s.as_str(), 0, "-", "-"),
            };
            out.push_str(&line);
        }
        out
    }
}

/// Which settings to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettingSelection {
    One(EvalSetting),
    All,
}

impl std::str::FromStr for SettingSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(SettingSelection::All);
        }
        s.parse::<EvalSetting>().map(SettingSelection::One).map_err(|e| e.to_string())
    }
}

/// Scores every sample once and aggregates per setting. A setting asked
/// for by name must have samples; under [`SettingSelection::All`] empty
/// settings are reported as `null`.
pub fn evaluate(
    dataset: &str,
    root: &Path,
    split: &BenchmarkSplit,
    predictor: &dyn Predictor,
    selection: SettingSelection,
    threshold: f32,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let wanted: Vec<EvalSetting> = match selection {
        SettingSelection::One(s) => vec![s],
        SettingSelection::All => EvalSetting::ALL.to_vec(),
    };
    if let SettingSelection::One(s) = selection {
        if !split.samples.iter().any(|x| s.admits(x.granularity)) {
            return Err(MaskError::EmptyEvaluation.into());
        }
    }
    let scored: Vec<(Granularity, IoUStats)> = split
        .samples
        .par_iter()
        .filter(|s| wanted.iter().any(|w| w.admits(s.granularity)))
        .map(|s| {
            let pred = predictor.predict(s, root, threshold)?;
            let gt = s.decode_mask()?;
            if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
                return Err(EvalError::PredictionSize {
                    id: s.sample_id.clone(),
                    got: (pred.width(), pred.height()),
                    want: (gt.width(), gt.height()),
                });
            }
            Ok((s.granularity, iou_stats(&pred, &gt)?))
        })
        .collect::<Result<_, EvalError>>()?;

    let mut settings = SettingsBlock::default();
    for s in wanted {
        let stats: Vec<IoUStats> = scored.iter().filter(|(g, _)| s.admits(*g)).map(|(_, st)| *st).collect();
        if stats.is_empty() {
            continue;
        }
        let oiou = match s {
            EvalSetting::ObjectOnly => Some(oiou(&stats)?),
            _ => None,
        };
        *settings.slot(s) = Some(SettingMetrics {
            samples: stats.len(),
            miou: miou(&stats)?,
            oiou,
        });
    }
    let object = split.samples.iter().filter(|s| s.granularity == Granularity::Object).count();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        split: split.name.as_str().to_string(),
        checkpoint: predictor.id(),
        threshold,
        settings,
        sample_counts: SampleCounts {
            object,
            part: split.samples.len() - object,
            total: split.samples.len(),
        },
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
