//! Benchmark sample schema, JSON-lines loading, granularity filtering,
//! tokenization and corpus statistics.
//!
//! A split lives in `<root>/<split>.jsonl`, one [`ReferringSample`] per line.
//! Image paths are resolved relative to `root`.

mod stats;
mod tokenizer;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{rle_decode, BinaryMask, MaskError, RleMask};

pub use stats::{compute_stats, CorpusStats};
pub use tokenizer::{
    tokenize, ExpressionTokens, Vocabulary, WordVocab, LONG_MAX_TEXT_LEN, MAX_TEXT_LEN,
};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "MRES_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("image `{0}` cannot be resolved")]
    MissingImage(String),
    #[error("expression is empty")]
    EmptyExpression,
    #[error("max_len must be at least 3, got {0}")]
    InvalidMaxLen(usize),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

impl DatasetError {
    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        DatasetError::Schema {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Object,
    Part,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Object => "object",
            Granularity::Part => "part",
        })
    }
}

/// One referring expression with its target mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringSample {
    pub sample_id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub image_w: usize,
    pub image_h: usize,
    pub expression: String,
    pub mask: RleMask,
    pub granularity: Granularity,
    pub object_category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_category: Option<String>,
}

impl ReferringSample {
    /// Checks the record invariants; the error names the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.sample_id.is_empty() {
            return Err(("sample_id", "empty id".into()));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(("image_w", "image dimensions must be positive".into()));
        }
        if self.expression.trim().is_empty() {
            return Err(("expression", "empty expression".into()));
        }
        if self.mask.width != self.image_w || self.mask.height != self.image_h {
            return Err((
                "mask",
                format!(
                    "mask is {}x{} but image is {}x{}",
                    self.mask.width, self.mask.height, self.image_w, self.image_h
                ),
            ));
        }
        self.mask.validate().map_err(|e| ("mask", e.to_string()))?;
        if self.object_category.is_empty() {
            return Err(("object_category", "empty category".into()));
        }
        match (self.granularity, &self.part_category) {
            (Granularity::Part, None) => {
                return Err(("part_category", "required for part granularity".into()))
            }
            (Granularity::Part, Some(p)) if p.is_empty() => {
                return Err(("part_category", "empty part category".into()))
            }
            (Granularity::Object, Some(_)) => {
                return Err(("part_category", "only allowed for part granularity".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn decode_mask(&self) -> Result<BinaryMask, MaskError> {
        rle_decode(&self.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitName {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::TestA => "testA",
            SplitName::TestB => "testB",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "testA" => Ok(SplitName::TestA),
            "testB" => Ok(SplitName::TestB),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplit {
    pub name: SplitName,
    pub samples: Vec<ReferringSample>,
}

impl BenchmarkSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.samples.iter().map(|s| s.sample_id.as_str()).collect()
    }
}

/// Evaluation granularity setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    ObjectOnly,
    PartOnly,
    ObjectAndPart,
}

impl EvalSetting {
    pub const ALL: [EvalSetting; 3] = [
        EvalSetting::ObjectOnly,
        EvalSetting::PartOnly,
        EvalSetting::ObjectAndPart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSetting::ObjectOnly => "object_only",
            EvalSetting::PartOnly => "part_only",
            EvalSetting::ObjectAndPart => "object_and_part",
        }
    }

    pub fn admits(self, g: Granularity) -> bool {
        match self {
            EvalSetting::ObjectOnly => g == Granularity::Object,
            EvalSetting::PartOnly => g == Granularity::Part,
            EvalSetting::ObjectAndPart => true,
        }
    }
}

impl FromStr for EvalSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "object_only" | "object" => Ok(EvalSetting::ObjectOnly),
            "part_only" | "part" => Ok(EvalSetting::PartOnly),
            "object_and_part" | "all" => Ok(EvalSetting::ObjectAndPart),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

pub fn filter_setting(split: &BenchmarkSplit, setting: EvalSetting) -> BenchmarkSplit {
    BenchmarkSplit {
        name: split.name,
        samples: split
            .samples
            .iter()
            .filter(|s| setting.admits(s.granularity))
            .cloned()
            .collect(),
    }
}

/// `$MRES_DATA_ROOT` if set.
pub fn default_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

pub fn split_path(root: &Path, split: SplitName) -> PathBuf {
    root.join(format!("{}.jsonl", split.as_str()))
}

pub fn load_benchmark(root: impl AsRef<Path>, split: SplitName) -> Result<BenchmarkSplit, DatasetError> {
    let path = split_path(root.as_ref(), split);
    let samples = load_jsonl(&path)?;
    Ok(BenchmarkSplit {
        name: split,
        samples,
    })
}

const REQUIRED_FIELDS: [&str; 8] = [
    "sample_id",
    "image",
    "image_w",
    "image_h",
    "expression",
    "mask",
    "granularity",
    "object_category",
];

fn parse_record(line_no: usize, line: &str) -> Result<ReferringSample, DatasetError> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| DatasetError::schema(line_no, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DatasetError::schema(line_no, "<record>", "expected a JSON object"))?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(DatasetError::schema(line_no, field, "missing field"));
        }
    }
    let sample: ReferringSample = serde_json::from_value(value.clone()).map_err(|e| {
        let message = e.to_string();
        // Attribute the failure to the first field that fails on its own.
        let field = REQUIRED_FIELDS
            .iter()
            .chain(std::iter::once(&"part_category"))
            .find(|f| field_fails(obj, f))
            .copied()
            .unwrap_or("<record>");
        DatasetError::schema(line_no, field, message)
    })?;
    sample
        .validate()
        .map_err(|(field, message)| DatasetError::schema(line_no, field, message))?;
    Ok(sample)
}

fn field_fails(obj: &serde_json::Map<String, serde_json::Value>, field: &str) -> bool {
    let Some(v) = obj.get(field) else {
        return false;
    };
    let v = v.clone();
    match field {
        "sample_id" | "image" | "expression" | "object_category" => {
            serde_json::from_value::<String>(v).is_err()
        }
        "image_w" | "image_h" => serde_json::from_value::<usize>(v).is_err(),
        "mask" => serde_json::from_value::<RleMask>(v).is_err(),
        "granularity" => serde_json::from_value::<Granularity>(v).is_err(),
        "part_category" => serde_json::from_value::<Option<String>>(v).is_err(),
        _ => false,
    }
}

/// Loads and validates a JSON-lines sample file. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<ReferringSample>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(line_no, &line)?;
        if !seen.insert(sample.sample_id.clone()) {
            return Err(DatasetError::schema(
                line_no,
                "sample_id",
                format!("duplicate id `{}`", sample.sample_id),
            ));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DatasetError::schema(0, "<split>", "empty split"));
    }
    Ok(samples)
}

/// Writes samples as JSON lines in struct field order.
pub fn write_jsonl(path: &Path, samples: &[ReferringSample]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn save_benchmark(root: impl AsRef<Path>, split: &BenchmarkSplit) -> Result<PathBuf, DatasetError> {
    let path = split_path(root.as_ref(), split.name);
    write_jsonl(&path, &split.samples)?;
    Ok(path)
}

pub fn resolve_image(root: &Path, image_ref: &str) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads the RGB image behind a sample.
pub fn load_image(root: &Path, sample: &ReferringSample) -> Result<image::RgbImage, DatasetError> {
    let path = resolve_image(root, &sample.image_ref);
    if !path.is_file() {
        return Err(DatasetError::MissingImage(sample.image_ref.clone()));
    }
    image::open(&path)
        .map(|img| img.to_rgb8())
        .map_err(|_| DatasetError::MissingImage(sample.image_ref.clone()))
}
