//! Mask geometry and metric kernels.
//!
//! Masks are stored row-major. The run-length form alternates background and
//! foreground runs and always starts with a background run, so a mask whose
//! first pixel is foreground encodes with a leading `0`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default confidence cutoff used to turn a probability map into a mask.
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.35;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("mask data has {actual} entries, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("mask entry {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: u8 },
    #[error("probability entry {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("rle counts sum to {sum}, expected {expected}")]
    SumMismatch { expected: u64, sum: u64 },
    #[error("rle has a zero-length run at position {index}")]
    InteriorZeroRun { index: usize },
    #[error("shape mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    ShapeMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("total union over the evaluation set is zero")]
    DegenerateUnion,
    #[error("image error: {0}")]
    Image(String),
}

fn check_dims(width: usize, height: usize) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyDimensions { width, height });
    }
    Ok(())
}

/// A binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(MaskError::LengthMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MaskError::NonBinary { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    /// Builds a mask from a predicate over pixel coordinates `(x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Nearest-neighbour resize, sampling at pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<BinaryMask, MaskError> {
        check_dims(width, height)?;
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        BinaryMask::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    /// Reads a single-channel (or any) PNG; nonzero luma is foreground.
    pub fn from_png(path: impl AsRef<Path>) -> Result<BinaryMask, MaskError> {
        let img = image::open(path.as_ref())
            .map_err(|e| MaskError::Image(e.to_string()))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect();
        BinaryMask::new(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path.as_ref())
            .map_err(|e| MaskError::Image(e.to_string()))
    }
}

/// Run-length encoded mask; serializes as `{"w", "h", "counts"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    /// Checks the count sum and the no-interior-zero-run rule.
    pub fn validate(&self) -> Result<(), MaskError> {
        check_dims(self.width, self.height)?;
        let expected = (self.width * self.height) as u64;
        let sum: u64 = self.counts.iter().sum();
        if sum != expected {
            return Err(MaskError::SumMismatch { expected, sum });
        }
        if let Some(index) = self
            .counts
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, &c)| c == 0)
            .map(|(i, _)| i)
        {
            return Err(MaskError::InteriorZeroRun { index });
        }
        Ok(())
    }

    /// Number of foreground pixels (odd-indexed runs).
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for &v in &mask.data {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        width: mask.width,
        height: mask.height,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    rle.validate()?;
    let mut data = Vec::with_capacity(rle.width * rle.height);
    for (i, &run) in rle.counts.iter().enumerate() {
        let value = (i % 2) as u8;
        data.extend(std::iter::repeat_n(value, run as usize));
    }
    Ok(BinaryMask {
        width: rle.width,
        height: rle.height,
        data,
    })
}

/// Integer intersection and union pixel counts for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IoUStats {
    pub intersection: u64,
    pub union: u64,
}

impl IoUStats {
    pub fn new(intersection: u64, union: u64) -> Self {
        assert!(intersection <= union, "intersection exceeds union");
        Self {
            intersection,
            union,
        }
    }

    /// Per-sample IoU; two empty masks agree perfectly.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou_stats(pred: &BinaryMask, gt: &BinaryMask) -> Result<IoUStats, MaskError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(MaskError::ShapeMismatch {
            left_w: pred.width,
            left_h: pred.height,
            right_w: gt.width,
            right_h: gt.height,
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok(IoUStats::new(inter, union))
}

/// Mean of per-sample IoUs.
///
/// Each per-sample IoU is an exact rational; the sum is accumulated over
/// reduced fractions sorted into a canonical order so that any permutation of
/// the input yields the same bits.
pub fn miou(samples: &[IoUStats]) -> Result<f64, MaskError> {
    if samples.is_empty() {
        return Err(MaskError::EmptyEvaluation);
    }
    let mut ratios: Vec<(u64, u64)> = samples
        .iter()
        .map(|s| if s.union == 0 { (1, 1) } else { (s.intersection, s.union) })
        .collect();
    ratios.sort_unstable();
    let total: f64 = ratios.iter().map(|&(i, u)| i as f64 / u as f64).sum();
    Ok(total / samples.len() as f64)
}

/// Ratio of summed intersections to summed unions.
pub fn oiou(samples: &[IoUStats]) -> Result<f64, MaskError> {
    if samples.is_empty() {
        return Err(MaskError::EmptyEvaluation);
    }
    let inter: u64 = samples.iter().map(|s| s.intersection).sum();
    let union: u64 = samples.iter().map(|s| s.union).sum();
    if union == 0 {
        return Err(MaskError::DegenerateUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-pixel confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(MaskError::LengthMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(MaskError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, MaskError> {
        ProbMask::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Foreground iff confidence is strictly greater than `threshold`.
pub fn binarize(p: &ProbMask, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|&v| u8::from(v > threshold)).collect(),
    }
}

/// Source sample positions and weights for one output axis of a bilinear
/// resize with half-pixel centres and edge clamping.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a probability map.
pub fn resize_prob(p: &ProbMask, width: usize, height: usize) -> Result<ProbMask, MaskError> {
    check_dims(width, height)?;
    if width == p.width && height == p.height {
        return Ok(p.clone());
    }
    let xs = bilinear_taps(p.width, width);
    let ys = bilinear_taps(p.height, height);
    let mut data = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = f64::from(p.get(x0, y0));
            let v01 = f64::from(p.get(x1, y0));
            let v10 = f64::from(p.get(x0, y1));
            let v11 = f64::from(p.get(x1, y1));
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            let v = top + (bottom - top) * fy;
            data.push((v as f32).clamp(0.0, 1.0));
        }
    }
    Ok(ProbMask {
        width,
        height,
        data,
    })
}
