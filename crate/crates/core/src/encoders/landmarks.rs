//! Face and lip masks from an image.

use crate::data_model::{FaceGeometry, Image};
use crate::error::{Error, Result};

/// Binary masks at image resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMasks {
    pub hw: usize,
    pub face: Vec<bool>,
    pub lip: Vec<bool>,
}

impl FaceMasks {
    pub fn empty(hw: usize) -> Self {
        Self {
            hw,
            face: vec![false; hw * hw],
            lip: vec![false; hw * hw],
        }
    }

    pub fn check(&self, hw: usize) -> Result<()> {
        if self.hw != hw || self.face.len() != hw * hw || self.lip.len() != hw * hw {
            return Err(Error::shape(format!(
                "landmark masks are {}x{} ({} / {} px), expected {hw}x{hw}",
                self.hw,
                self.hw,
                self.face.len(),
                self.lip.len()
            )));
        }
        Ok(())
    }

    /// Vertical extent of the lip mask in pixels.
    pub fn lip_height(&self) -> f64 {
        let rows: Vec<usize> = (0..self.hw)
            .filter(|&y| (0..self.hw).any(|x| self.lip[y * self.hw + x]))
            .collect();
        match (rows.first(), rows.last()) {
            (Some(a), Some(b)) => (b - a + 1) as f64,
            _ => 0.0,
        }
    }
}

pub trait LandmarkProvider {
    fn masks(&self, image: &Image) -> Result<FaceMasks>;

    /// Scalar mouth opening used by the sync metric.
    fn lip_aperture(&self, image: &Image) -> Result<f64> {
        Ok(self.masks(image)?.lip_height())
    }
}

/// Rasterizes masks from a known face layout (pixel centres).
#[derive(Clone, Debug)]
pub struct AnalyticLandmarks {
    pub geometry: FaceGeometry,
}

impl AnalyticLandmarks {
    pub fn rasterize(geometry: &FaceGeometry, hw: usize) -> FaceMasks {
        let mut m = FaceMasks::empty(hw);
        for y in 0..hw {
            for x in 0..hw {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                m.face[y * hw + x] = geometry.in_head(px, py);
                m.lip[y * hw + x] = geometry.in_mouth(px, py);
            }
        }
        m
    }
}

impl LandmarkProvider for AnalyticLandmarks {
    fn masks(&self, image: &Image) -> Result<FaceMasks> {
        Ok(Self::rasterize(&self.geometry, image.height()))
    }

    fn lip_aperture(&self, _image: &Image) -> Result<f64> {
        Ok(2.0 * self.geometry.mouth_half_height)
    }
}

/// Always returns empty masks.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmptyLandmarks;

impl LandmarkProvider for EmptyLandmarks {
    fn masks(&self, image: &Image) -> Result<FaceMasks> {
        Ok(FaceMasks::empty(image.height()))
    }
}

/// Colour heuristics for flat-shaded faces: the face differs from the border
/// colour, the lips are the dark pixels in the lower half of the face.
#[derive(Clone, Copy, Debug)]
pub struct PixelLandmarks {
    pub face_threshold: f64,
    pub dark_level: f64,
}

impl Default for PixelLandmarks {
    fn default() -> Self {
        Self {
            face_threshold: 0.15,
            dark_level: 0.12,
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

impl PixelLandmarks {
    fn background(image: &Image) -> [f64; 3] {
        let (h, w) = (image.height(), image.width());
        let corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)];
        let mut acc = [0.0; 3];
        for (y, x) in corners {
            let p = image.pixel(y, x);
            for c in 0..3 {
                acc[c] += p[c] / 4.0;
            }
        }
        acc
    }

    /// Face mask, its centre row and median face luma.
    fn face(&self, image: &Image) -> (Vec<bool>, f64, f64) {
        let hw = image.height();
        let bg = Self::background(image);
        let mut face = vec![false; hw * hw];
        let (mut rows, mut count) = (0.0, 0.0);
        let mut lumas = Vec::new();
        for y in 0..hw {
            for x in 0..hw {
                let p = image.pixel(y, x);
                let dist = (0..3).map(|c| (p[c] - bg[c]).abs()).fold(0.0, f64::max);
                if dist > self.face_threshold {
                    face[y * hw + x] = true;
                    rows += y as f64;
                    count += 1.0;
                    lumas.push(luma(p));
                }
            }
        }
        if count == 0.0 {
            return (face, hw as f64 / 2.0, 1.0);
        }
        lumas.sort_by(f64::total_cmp);
        (face, rows / count, lumas[lumas.len() / 2])
    }

    /// Per-pixel darkness weight in `[0, 1]` over the lower face.
    fn darkness(&self, image: &Image) -> (Vec<bool>, Vec<f64>) {
        let hw = image.height();
        let (face, center_row, face_luma) = self.face(image);
        let span = (face_luma - self.dark_level).max(1e-6);
        let mut weight = vec![0.0; hw * hw];
        for y in 0..hw {
            if (y as f64) < center_row {
                continue;
            }
            for x in 0..hw {
                let l = luma(image.pixel(y, x));
                let inside = face[y * hw + x] || l < face_luma - 0.5 * span;
                if inside {
                    weight[y * hw + x] = ((face_luma - l) / span).clamp(0.0, 1.0);
                }
            }
        }
        (face, weight)
    }
}

impl LandmarkProvider for PixelLandmarks {
    fn masks(&self, image: &Image) -> Result<FaceMasks> {
        let hw = image.height();
        let (face, weight) = self.darkness(image);
        Ok(FaceMasks {
            hw,
            face,
            lip: weight.iter().map(|&w| w > 0.5).collect(),
        })
    }

    /// Dark area of the lower face divided by its width, a sub-pixel
    /// estimate of the mouth height.
    fn lip_aperture(&self, image: &Image) -> Result<f64> {
        let hw = image.height();
        let (_, weight) = self.darkness(image);
        let area: f64 = weight.iter().sum();
        let cols = (0..hw)
            .filter(|&x| (0..hw).any(|y| weight[y * hw + x] > 0.5))
            .count()
            .max(1);
        Ok(area / cols as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> FaceGeometry {
        FaceGeometry {
            center: (32.0, 32.0),
            head_radius: 22.0,
            mouth_center: (32.0, 42.0),
            mouth_half_width: 8.0,
            mouth_half_height: 3.0,
        }
    }

    #[test]
    fn analytic_masks_follow_geometry() {
        let m = AnalyticLandmarks::rasterize(&geometry(), 64);
        assert!(m.face[32 * 64 + 32]);
        assert!(!m.face[0]);
        assert!(m.lip[42 * 64 + 32]);
        assert!(!m.lip[32 * 64 + 32]);
        assert_eq!(m.lip_height(), 6.0);
    }

    #[test]
    fn wrong_resolution_is_detected() {
        assert!(FaceMasks::empty(32).check(64).is_err());
    }

    #[test]
    fn empty_provider_on_blank_image() {
        let img = Image::filled(16, [0.5, 0.5, 0.5]);
        let m = EmptyLandmarks.masks(&img).unwrap();
        assert!(m.face.iter().chain(&m.lip).all(|&v| !v));
    }
}
