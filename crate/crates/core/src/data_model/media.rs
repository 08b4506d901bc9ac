use serde::{Deserialize, Serialize};
use stfm_tensor::Tensor;

use super::config::ScaleConfig;
use crate::error::{Error, Result};

/// Smallest magnitude kept in a spectrogram; `ln` of it is the log floor.
pub const MEL_FLOOR: f64 = 1e-5;

/// Fixed affine map from log magnitudes to model features.
const FEATURE_SHIFT: f64 = 6.0;
const FEATURE_SCALE: f64 = 3.0;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// First `n` samples (or all of them when shorter).
    pub fn head(&self, n: usize) -> Waveform {
        Waveform {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Errors unless the clip lasts `expected_s` within one hop.
    pub fn check_duration(&self, expected_s: f64, hop: usize) -> Result<()> {
        let tolerance_s = hop as f64 / self.sample_rate as f64;
        let measured_s = self.duration_s();
        if (measured_s - expected_s).abs() > tolerance_s + 1e-12 {
            return Err(Error::Duration {
                measured_s,
                expected_s,
                tolerance_s,
            });
        }
        Ok(())
    }
}

/// `mel_bins x frames` linear magnitudes, floored at [`MEL_FLOOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    magnitudes: Tensor,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub duration_s: f64,
}

impl MelSpectrogram {
    pub fn new(magnitudes: Tensor, sample_rate: u32, hop_length: usize, duration_s: f64) -> Result<Self> {
        if magnitudes.rank() != 2 {
            return Err(Error::shape(format!(
                "spectrogram must be bins x frames, got {:?}",
                magnitudes.shape()
            )));
        }
        if !magnitudes.is_finite() {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        if magnitudes.data().iter().any(|&m| m < 0.0) {
            return Err(Error::arg("spectrogram magnitudes must be non-negative"));
        }
        let frames = magnitudes.shape()[1];
        let expected = (duration_s * sample_rate as f64 / hop_length as f64).floor() as i64 + 1;
        if (frames as i64 - expected).abs() > 1 {
            return Err(Error::shape(format!(
                "{frames} frames inconsistent with {duration_s:.4} s at hop {hop_length} (expected {expected})"
            )));
        }
        Ok(Self {
            magnitudes,
            sample_rate,
            hop_length,
            duration_s,
        })
    }

    /// Builds from frame-major log magnitudes `[frames, bins]`.
    pub fn from_log_frames(log_frames: &Tensor, sample_rate: u32, hop_length: usize) -> Result<Self> {
        let frames = log_frames.shape()[0];
        let mags = log_frames.transpose2().map(|v| v.exp().max(MEL_FLOOR));
        let duration_s = frames.saturating_sub(1) as f64 * hop_length as f64 / sample_rate as f64;
        Self::new(mags, sample_rate, hop_length, duration_s)
    }

    pub fn magnitudes(&self) -> &Tensor {
        &self.magnitudes
    }

    pub fn bins(&self) -> usize {
        self.magnitudes.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.magnitudes.shape()[1]
    }

    /// Natural-log magnitudes, `bins x frames`.
    pub fn log(&self) -> Tensor {
        self.magnitudes.map(|m| m.max(MEL_FLOOR).ln())
    }

    /// Natural-log magnitudes, frame-major `frames x bins`.
    pub fn log_frames(&self) -> Tensor {
        self.log().transpose2()
    }

    /// Normalized log magnitudes, frame-major; what the networks consume.
    pub fn features(&self) -> Tensor {
        self.log_frames().map(|v| (v + FEATURE_SHIFT) / FEATURE_SCALE)
    }

    /// Inverse of [`MelSpectrogram::features`].
    pub fn from_features(features: &Tensor, sample_rate: u32, hop_length: usize) -> Result<Self> {
        let log = features.map(|v| v * FEATURE_SCALE - FEATURE_SHIFT);
        Self::from_log_frames(&log, sample_rate, hop_length)
    }
}

/// RGB image, `[h, w, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape(format!("image must be [h, w, 3], got {s:?}")));
        }
        if let Some(&value) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range { value });
        }
        Ok(Self { data })
    }

    pub fn filled(hw: usize, rgb: [f64; 3]) -> Self {
        let data = Tensor::from_fn(&[hw, hw, 3], |i| rgb[i % 3]);
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width() + x) * 3;
        let d = self.data.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn expect_square(&self, hw: usize) -> Result<()> {
        if self.height() != hw || self.width() != hw {
            return Err(Error::shape(format!(
                "image is {}x{}, expected {hw}x{hw}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// `4 x f x h x w` video latents.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatentGrid {
    data: Tensor,
}

impl VideoLatentGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 || data.shape()[0] != 4 {
            return Err(Error::shape(format!(
                "video latents must be [4, f, h, w], got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("video latents".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, hw: usize) -> Self {
        Self {
            data: Tensor::zeros(&[4, frames, hw, hw]),
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn hw(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn check(&self, cfg: &ScaleConfig) -> Result<()> {
        let s = self.data.shape();
        if s[1] != cfg.frame_count || s[2] != cfg.latent_hw || s[3] != cfg.latent_hw {
            return Err(Error::shape(format!(
                "latents {s:?} do not match [4, {}, {}, {}]",
                cfg.frame_count, cfg.latent_hw, cfg.latent_hw
            )));
        }
        Ok(())
    }
}

/// Known face layout of a rendered image, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub center: (f64, f64),
    pub head_radius: f64,
    pub mouth_center: (f64, f64),
    pub mouth_half_width: f64,
    pub mouth_half_height: f64,
}

impl FaceGeometry {
    pub fn in_head(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        dx * dx + dy * dy <= self.head_radius * self.head_radius
    }

    pub fn in_mouth(&self, x: f64, y: f64) -> bool {
        if self.mouth_half_height <= 0.0 {
            return false;
        }
        let dx = (x - self.mouth_center.0) / self.mouth_half_width;
        let dy = (y - self.mouth_center.1) / self.mouth_half_height;
        dx * dx + dy * dy <= 1.0
    }
}

/// One training / evaluation item.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub source_image: Image,
    pub reference_audio: Waveform,
    pub transcript: String,
    pub gt_frames: Vec<Image>,
    pub gt_audio: Waveform,
    /// Face layout of the source image when the renderer knows it.
    pub geometry: Option<FaceGeometry>,
}

impl Sample {
    pub fn validate(&self, cfg: &ScaleConfig) -> Result<()> {
        self.source_image.expect_square(cfg.image_hw)?;
        for f in &self.gt_frames {
            f.expect_square(cfg.image_hw)?;
        }
        if self.reference_audio.sample_rate != cfg.sample_rate || self.gt_audio.sample_rate != cfg.sample_rate {
            return Err(Error::arg("audio sample rate does not match the config"));
        }
        self.reference_audio.check_duration(cfg.reference_seconds, cfg.hop_length)?;
        if self.transcript.trim().is_empty() {
            return Err(Error::arg(format!("sample {} has an empty transcript", self.id)));
        }
        Ok(())
    }
}
