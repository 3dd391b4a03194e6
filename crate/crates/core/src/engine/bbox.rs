use serde::{Deserialize, Serialize};

use super::EngineError;

/// Upper end of the normalized coordinate range.
pub const NORM_MAX: u16 = 999;

/// Pixel-space box, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// `0 ≤ x0 ≤ x1 ≤ width` and likewise vertically, all finite.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), EngineError> {
        let [x0, y0, x1, y1] = <[f64; 4]>::from(*self);
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 <= x1
            && x1 <= width as f64
            && 0.0 <= y0
            && y0 <= y1
            && y1 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(EngineError::InvalidBox(format!(
                "[{x0}, {y0}, {x1}, {y1}] is not inside a {width}x{height} image"
            )))
        }
    }

    /// Integer pixel ranges covered by the box: floor of the low edge to
    /// ceiling of the high edge, clamped to the image.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clamp(self.x0.floor(), width),
            clamp(self.y0.floor(), height),
            clamp(self.x1.ceil(), width),
            clamp(self.y1.ceil(), height),
        )
    }
}

/// Box in the resolution-free `[0, 999]` integer frame, serialized as
/// `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u16; 4]", into = "[u16; 4]")]
pub struct NormalizedBBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl From<[u16; 4]> for NormalizedBBox {
    fn from([x0, y0, x1, y1]: [u16; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<NormalizedBBox> for [u16; 4] {
    fn from(b: NormalizedBBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl std::fmt::Display for NormalizedBBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl NormalizedBBox {
    pub const FULL: NormalizedBBox = NormalizedBBox {
        x0: 0,
        y0: 0,
        x1: NORM_MAX,
        y1: NORM_MAX,
    };

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= NORM_MAX && self.y1 <= NORM_MAX
    }
}

/// `round(coord / dim × 999)`, rounding halves away from zero and clamping
/// to `[0, 999]`.
pub fn normalize_bbox(b: &BBox, width: usize, height: usize) -> Result<NormalizedBBox, EngineError> {
    if width == 0 || height == 0 {
        return Err(EngineError::InvalidBox(format!("image is {width}x{height}")));
    }
    b.validate(width, height)?;
    let scale = |v: f64, dim: usize| (v / dim as f64 * f64::from(NORM_MAX)).round().clamp(0.0, f64::from(NORM_MAX)) as u16;
    Ok(NormalizedBBox {
        x0: scale(b.x0, width),
        y0: scale(b.y0, height),
        x1: scale(b.x1, width),
        y1: scale(b.y1, height),
    })
}

/// The part-level caption template `<part> of <object>`.
pub fn part_caption(part: &str, object: &str) -> Result<String, EngineError> {
    let (part, object) = (part.trim(), object.trim());
    if part.is_empty() || object.is_empty() {
        return Err(EngineError::EmptyName);
    }
    Ok(format!("{part} of {object}"))
}
