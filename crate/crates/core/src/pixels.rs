//! Image preprocessing: resize to the model input size and normalize.

use image::{imageops, Rgb, RgbImage};

/// Per-channel normalization statistics of the dual-encoder backbone family.
pub const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Normalized RGB pixels, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PixelGrid {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for px in img.pixels() {
            for c in 0..3 {
                data.push((f32::from(px[c]) / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c]);
            }
        }
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// Bilinear resize to `size × size`, then normalize.
    pub fn prepare(img: &RgbImage, size: usize) -> Self {
        if img.width() as usize == size && img.height() as usize == size {
            return Self::from_rgb(img);
        }
        let resized = imageops::resize(img, size as u32, size as u32, imageops::FilterType::Triangle);
        Self::from_rgb(&resized)
    }

    pub fn solid(size: usize, rgb: [u8; 3]) -> Self {
        Self::from_rgb(&RgbImage::from_pixel(size as u32, size as u32, Rgb(rgb)))
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

    /// Splits into non-overlapping `patch × patch` tiles, one row per tile in
    /// row-major tile order; each row lists pixels row-major, channels
    /// interleaved.
    pub fn patchify(&self, patch: usize) -> (usize, Vec<f32>) {
        assert!(self.width % patch == 0 && self.height % patch == 0, "patch must tile the image");
        let (gw, gh) = (self.width / patch, self.height / patch);
        let dim = patch * patch * 3;
        let mut out = Vec::with_capacity(gw * gh * dim);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * self.width + px * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        (gw * gh, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_tiles_row_major() {
        let mut img = RgbImage::new(4, 2);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgb([(x + 10 * y) as u8, 0, 0]);
        }
        let grid = PixelGrid::from_rgb(&img);
        let (n, data) = grid.patchify(2);
        assert_eq!(n, 2);
        let red = |v: f32| ((v * PIXEL_STD[0] + PIXEL_MEAN[0]) * 255.0).round() as u32;
        let first: Vec<u32> = data[..12].iter().step_by(3).map(|&v| red(v)).collect();
        let second: Vec<u32> = data[12..].iter().step_by(3).map(|&v| red(v)).collect();
        assert_eq!(first, vec![0, 1, 10, 11]);
        assert_eq!(second, vec![2, 3, 12, 13]);
    }

    #[test]
    fn prepare_resizes() {
        let img = RgbImage::from_pixel(10, 6, Rgb([200, 100, 50]));
        let g = PixelGrid::prepare(&img, 8);
        assert_eq!((g.width(), g.height()), (8, 8));
        assert_eq!(g.data().len(), 8 * 8 * 3);
    }
}
