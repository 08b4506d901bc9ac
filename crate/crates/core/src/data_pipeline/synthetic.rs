//! Procedural talking faces whose mouth opening follows the audio envelope.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use stfm_tensor::{Rng, Tensor};

use super::dsp::frame_rms;
use crate::data_model::{FaceGeometry, Image, Sample, ScaleConfig, Waveform};
use crate::error::{Error, Result};

pub const ALPHABET: &str = "abcdefgh";
/// Video frames covered by one character.
pub const FRAMES_PER_CHAR: usize = 2;
pub const MIN_CHARS: usize = 16;
pub const MAX_CHARS: usize = 20;

const PITCH_RATIOS: [f64; 8] = [1.0, 1.12, 1.25, 1.33, 1.5, 1.68, 1.87, 2.0];
const AMPLITUDES: [[f64; 2]; 8] = [
    [0.60, 0.20],
    [0.15, 0.50],
    [0.40, 0.40],
    [0.05, 0.30],
    [0.50, 0.05],
    [0.25, 0.60],
    [0.10, 0.10],
    [0.35, 0.20],
];
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.25];
const MOUTH_MIN: f64 = 0.5;
const MOUTH_GAIN: f64 = 1.2;
const MOUTH_COLOR: [f64; 3] = [0.10, 0.03, 0.04];
const EYE_COLOR: [f64; 3] = [0.05, 0.05, 0.12];
const SUPERSAMPLE: usize = 4;

/// Per-sample appearance and voice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub head_radius: f64,
    pub center: (f64, f64),
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub base_pitch: f64,
}

impl Identity {
    pub fn random(rng: &mut Rng, hw: usize) -> Self {
        let s = hw as f64 / 64.0;
        let mid = hw as f64 / 2.0;
        Self {
            head_radius: rng.random_range(20.0..26.0) * s,
            center: (mid + rng.random_range(-3.0..3.0) * s, mid - 2.0 * s + rng.random_range(-2.0..2.0) * s),
            skin: [rng.random_range(0.55..0.95), rng.random_range(0.40..0.75), rng.random_range(0.30..0.60)],
            background: [rng.random_range(0.05..0.35), rng.random_range(0.15..0.45), rng.random_range(0.25..0.55)],
            base_pitch: rng.random_range(100.0..250.0),
        }
    }

    pub fn geometry(&self, mouth_half_height: f64) -> FaceGeometry {
        let r = self.head_radius;
        FaceGeometry {
            center: self.center,
            head_radius: r,
            mouth_center: (self.center.0, self.center.1 + 0.45 * r),
            mouth_half_width: 0.35 * r,
            mouth_half_height,
        }
    }

    pub fn mouth_height_for(&self, rms: f64) -> f64 {
        MOUTH_MIN + MOUTH_GAIN * self.head_radius * rms
    }
}

fn char_index(c: char) -> Result<usize> {
    ALPHABET
        .find(c)
        .ok_or_else(|| Error::arg(format!("character {c:?} outside the synthetic alphabet")))
}

pub fn random_text(rng: &mut Rng, len: usize) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect()
}

/// Harmonic tones, one per character, each spanning [`FRAMES_PER_CHAR`]
/// video frames with a constant amplitude per frame.
pub fn speak(text: &str, base_pitch: f64, cfg: &ScaleConfig) -> Result<Waveform> {
    let spf = cfg.samples_per_frame();
    let sr = cfg.sample_rate as f64;
    let mut samples = Vec::with_capacity(text.len() * FRAMES_PER_CHAR * spf);
    let mut phase = 0.0;
    for c in text.chars() {
        let k = char_index(c)?;
        let f0 = base_pitch * PITCH_RATIOS[k];
        for amp in AMPLITUDES[k].iter().take(FRAMES_PER_CHAR) {
            for _ in 0..spf {
                let v: f64 = HARMONICS
                    .iter()
                    .enumerate()
                    .map(|(h, g)| g * ((h + 1) as f64 * phase).sin())
                    .sum();
                samples.push(amp * v / 1.75);
                phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            }
        }
    }
    Waveform::new(samples, cfg.sample_rate)
}

/// Antialiased face with the given mouth half-height.
pub fn render(identity: &Identity, mouth_half_height: f64, hw: usize) -> Result<Image> {
    let geom = identity.geometry(mouth_half_height);
    let r = identity.head_radius;
    let eyes = [
        (identity.center.0 - 0.38 * r, identity.center.1 - 0.25 * r),
        (identity.center.0 + 0.38 * r, identity.center.1 - 0.25 * r),
    ];
    let eye_r2 = (0.1 * r).powi(2);
    let n = SUPERSAMPLE;
    let data = Tensor::from_fn(&[hw, hw, 3], |i| {
        let (y, x, c) = (i / (hw * 3), (i / 3) % hw, i % 3);
        let mut acc = 0.0;
        for sy in 0..n {
            for sx in 0..n {
                let px = x as f64 + (sx as f64 + 0.5) / n as f64;
                let py = y as f64 + (sy as f64 + 0.5) / n as f64;
                acc += if geom.in_mouth(px, py) {
                    MOUTH_COLOR[c]
                } else if eyes.iter().any(|e| (px - e.0).powi(2) + (py - e.1).powi(2) <= eye_r2) {
                    EYE_COLOR[c]
                } else if geom.in_head(px, py) {
                    identity.skin[c]
                } else {
                    identity.background[c]
                };
            }
        }
        acc / (n * n) as f64
    });
    Image::new(data)
}

/// A generated item with the ground truth the renderer used.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub identity: Identity,
    /// Mouth half-height of every video frame.
    pub mouth_heights: Vec<f64>,
    /// Audio RMS of every video frame.
    pub envelope: Vec<f64>,
}

pub fn synthesize_sample(id: String, identity: Identity, text: &str, reference_text: &str, cfg: &ScaleConfig) -> Result<SyntheticSample> {
    let audio = speak(text, identity.base_pitch, cfg)?;
    let f = cfg.frame_count;
    let spf = cfg.samples_per_frame();
    if audio.len() < f * spf {
        return Err(Error::Duration {
            measured_s: audio.duration_s(),
            expected_s: cfg.clip_seconds(),
            tolerance_s: 0.0,
        });
    }
    let envelope = frame_rms(&audio.samples, spf, f);
    let mouth_heights: Vec<f64> = envelope.iter().map(|&e| identity.mouth_height_for(e)).collect();
    let gt_frames = mouth_heights
        .iter()
        .map(|&m| render(&identity, m, cfg.image_hw))
        .collect::<Result<Vec<_>>>()?;
    let rest = identity.mouth_height_for(0.0);
    let reference_audio = speak(reference_text, identity.base_pitch, cfg)?;
    let sample = Sample {
        id,
        source_image: render(&identity, rest, cfg.image_hw)?,
        reference_audio,
        transcript: text.to_string(),
        gt_frames,
        gt_audio: audio,
        geometry: Some(identity.geometry(rest)),
    };
    Ok(SyntheticSample {
        sample,
        identity,
        mouth_heights,
        envelope,
    })
}

/// Characters of reference speech filling `reference_seconds`.
pub fn reference_chars(cfg: &ScaleConfig) -> usize {
    let per_char = (FRAMES_PER_CHAR * cfg.samples_per_frame()) as f64 / cfg.sample_rate as f64;
    (cfg.reference_seconds / per_char).round() as usize
}

/// `n` samples, each with its own identity; identical for identical seeds.
pub fn synthesize_dataset(n: usize, seed: u64, cfg: &ScaleConfig) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::arg("dataset size must be at least 1"));
    }
    let min_chars = cfg.frame_count.div_ceil(FRAMES_PER_CHAR).max(MIN_CHARS);
    let max_chars = min_chars.max(MAX_CHARS);
    let mut rng = stfm_tensor::rng(seed);
    (0..n)
        .map(|i| {
            let identity = Identity::random(&mut rng, cfg.image_hw);
            let len = rng.random_range(min_chars..=max_chars);
            let text = random_text(&mut rng, len);
            let reference = random_text(&mut rng, reference_chars(cfg));
            synthesize_sample(format!("syn{seed}_{i:04}"), identity, &text, &reference, cfg)
        })
        .collect()
}
