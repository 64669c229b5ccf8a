//! Per-pixel buffers shared by every stage: RGB images and depth maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Round every channel to the nearest multiple of 1/255 so that 8-bit
    /// storage is lossless.
    pub fn quantize_8bit(&mut self) {
        for px in &mut self.pixels {
            for c in px.iter_mut() {
                *c = (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
}

/// Whether a depth map is known only up to an affine transform or carries
/// world units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthFrame {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub validity: Vec<bool>,
    pub frame: DepthFrame,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, frame: DepthFrame) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            validity: vec![false; width * height],
            frame,
        }
    }

    /// All pixels valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>, frame: DepthFrame) -> Self {
        assert_eq!(values.len(), width * height, "depth buffer size mismatch");
        Self {
            width,
            height,
            validity: vec![true; values.len()],
            values,
            frame,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.validity[i].then_some(self.values[i])
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = self.index(x, y);
        self.values[i] = v;
        self.validity[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Valid entries must be finite.
    pub fn is_consistent(&self) -> bool {
        self.values.len() == self.width * self.height
            && self.validity.len() == self.values.len()
            && self
                .values
                .iter()
                .zip(&self.validity)
                .all(|(v, &ok)| !ok || v.is_finite())
    }

    /// Round values to float32 so that PFM storage is bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}
