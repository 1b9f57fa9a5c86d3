//! Grayscale image buffer with bilinear sampling, shared by the photometric
//! loss, the synthetic renderer, and dataset loading. Intensities live in
//! `[0, 1]`.

use nalgebra::Vector2;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.data[(y * self.width + x) as usize] = v;
    }

    /// Bilinear sample at a continuous pixel position (pixel centers at
    /// half-integers) together with the spatial gradient. `None` outside the
    /// full bilinear support.
    pub fn sample_bilinear(&self, pos: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        let x = pos.x - 0.5;
        let y = pos.y - 0.5;
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let (x1, y1) = (x0 as u32 + 1, y0 as u32 + 1);
        if x1 >= self.width || y1 >= self.height {
            return None;
        }
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as u32, y0 as u32);
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        let value = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
        let grad = Vector2::new(
            (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy,
            (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx,
        );
        Some((value, grad))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        let img = image::GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([(self.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)
    }

    pub fn load_png(path: &Path) -> Result<Self, image::ImageError> {
        let img = image::open(path)?.into_luma8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            data: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bilinear_at_pixel_center_is_exact() {
        let mut img = GrayImage::new(4, 4);
        img.set(1, 2, 0.7);
        let (v, _) = img.sample_bilinear(&Vector2::new(1.5, 2.5)).unwrap();
        assert_abs_diff_eq!(v, 0.7);
    }

    #[test]
    fn bilinear_interpolates_and_differentiates() {
        let mut img = GrayImage::new(2, 2);
        img.set(0, 0, 0.0);
        img.set(1, 0, 1.0);
        img.set(0, 1, 0.0);
        img.set(1, 1, 1.0);
        let (v, g) = img.sample_bilinear(&Vector2::new(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, 0.5);
        assert_abs_diff_eq!(g.x, 1.0);
        assert_abs_diff_eq!(g.y, 0.0);
    }

    #[test]
    fn outside_support_is_none() {
        let img = GrayImage::new(4, 4);
        assert!(img.sample_bilinear(&Vector2::new(0.2, 2.0)).is_none());
        assert!(img.sample_bilinear(&Vector2::new(3.9, 2.0)).is_none());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::new(8, 4);
        for y in 0..4 {
            for x in 0..8 {
                img.set(x, y, (x + y) as f64 / 16.0);
            }
        }
        let path = dir.path().join("img.png");
        img.save_png(&path).unwrap();
        let loaded = GrayImage::load_png(&path).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                assert!((loaded.get(x, y) - img.get(x, y)).abs() < 1.0 / 255.0);
            }
        }
    }
}
