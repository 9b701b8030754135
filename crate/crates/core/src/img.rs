//! Owned image buffers used across the pipeline.
//!
//! Rendered and ground-truth images are linear RGB with values in [0, 1],
//! stored row-major as f64. Masks and label maps share the same layout.

use nalgebra::Vector3;

/// Row-major H x W RGB image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>, // 3 * width * height
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, color: Vector3<f64>) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px[0] = color.x;
            px[1] = color.y;
            px[2] = color.z;
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = 3 * (y * self.width + x);
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: Vector3<f64>) {
        let i = 3 * (y * self.width + x);
        self.data[i] = c.x;
        self.data[i + 1] = c.y;
        self.data[i + 2] = c.z;
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Quantize to 8 bits per channel, clamping to [0, 1].
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), 3 * width * height, "rgb8 buffer size mismatch");
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

/// Binary mask paired with an image (1 = selected).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixel-wise AND.
    pub fn intersect(&self, other: &MaskImage) -> MaskImage {
        assert_eq!((self.width, self.height), (other.width, other.height));
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }
}

/// Per-pixel instance labels; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_within_quantization() {
        let mut img = ImageRgb::new(4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).fract();
        }
        let bytes = img.to_rgb8();
        let back = ImageRgb::from_rgb8(4, 3, &bytes);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mask_intersection() {
        let mut a = MaskImage::new(2, 2, true);
        let mut b = MaskImage::new(2, 2, true);
        a.set(0, 0, false);
        b.set(1, 1, false);
        let m = a.intersect(&b);
        assert!(!m.get(0, 0));
        assert!(m.get(1, 0));
        assert!(m.get(0, 1));
        assert!(!m.get(1, 1));
    }
}
