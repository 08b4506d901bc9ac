use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every dimension constant of the model in one place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    /// Embedding width `d`.
    pub channels: usize,
    /// `S`, audio-sequence tokens.
    pub audio_seq_len: usize,
    /// `P`, audio-profile tokens.
    pub audio_profile_len: usize,
    pub text_max_len: usize,
    /// `V`, fused visual tokens; must be a square with an even side.
    pub visual_token_len: usize,
    pub latent_channels: usize,
    pub latent_hw: usize,
    /// `f`, video frames per clip.
    pub frame_count: usize,
    pub mel_bins: usize,
    pub image_hw: usize,
    pub fps: usize,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub n_fft: usize,
    /// Longest spectrogram the audio decoder will emit.
    pub max_audio_frames: usize,
    pub reference_seconds: f64,
}

impl ScaleConfig {
    pub fn paper() -> Self {
        Self {
            channels: 512,
            audio_seq_len: 5600,
            audio_profile_len: 9,
            text_max_len: 64,
            visual_token_len: 3136,
            latent_channels: 4,
            latent_hw: 64,
            frame_count: 500,
            mel_bins: 80,
            image_hw: 512,
            fps: 25,
            sample_rate: 16_000,
            hop_length: 160,
            n_fft: 1024,
            max_audio_frames: 2048,
            reference_seconds: 2.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: 64,
            audio_seq_len: 120,
            audio_profile_len: 8,
            text_max_len: 24,
            visual_token_len: 64,
            latent_channels: 4,
            latent_hw: 8,
            frame_count: 32,
            mel_bins: 32,
            image_hw: 64,
            fps: 25,
            sample_rate: 8000,
            hop_length: 160,
            n_fft: 512,
            max_audio_frames: 96,
            reference_seconds: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::arg(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("audio_seq_len", self.audio_seq_len),
            ("audio_profile_len", self.audio_profile_len),
            ("text_max_len", self.text_max_len),
            ("visual_token_len", self.visual_token_len),
            ("latent_hw", self.latent_hw),
            ("frame_count", self.frame_count),
            ("mel_bins", self.mel_bins),
            ("image_hw", self.image_hw),
            ("fps", self.fps),
            ("hop_length", self.hop_length),
            ("n_fft", self.n_fft),
            ("max_audio_frames", self.max_audio_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if self.sample_rate == 0 || self.reference_seconds <= 0.0 {
            return Err(Error::arg("sample_rate and reference_seconds must be positive"));
        }
        if self.latent_channels != 4 {
            return Err(Error::arg(format!(
                "latent_channels must be 4, got {}",
                self.latent_channels
            )));
        }
        let g = self.visual_grid();
        if g * g != self.visual_token_len || !g.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "visual_token_len {} is not the square of an even grid side",
                self.visual_token_len
            )));
        }
        if self.image_hw != 8 * self.latent_hw {
            return Err(Error::arg(format!(
                "image_hw {} must be 8 x latent_hw {}",
                self.image_hw, self.latent_hw
            )));
        }
        if !self.latent_hw.is_multiple_of(2) {
            return Err(Error::arg("latent_hw must be even"));
        }
        if !self.channels.is_multiple_of(4) {
            return Err(Error::arg("channels must be divisible by 4"));
        }
        if self.n_fft < self.hop_length {
            return Err(Error::arg("n_fft must be at least hop_length"));
        }
        Ok(())
    }

    /// Side of the square visual token grid, `sqrt(V)`.
    pub fn visual_grid(&self) -> usize {
        (self.visual_token_len as f64).sqrt().round() as usize
    }

    /// Token counts of `(f_i, f_fm, f_lm)`; they sum to `V`.
    pub fn visual_split(&self) -> (usize, usize, usize) {
        let v = self.visual_token_len;
        (v / 2, v / 4, v / 4)
    }

    /// Fused audio length `S + P`.
    pub fn audio_len(&self) -> usize {
        self.audio_seq_len + self.audio_profile_len
    }

    pub fn reference_samples(&self) -> usize {
        (self.reference_seconds * self.sample_rate as f64).round() as usize
    }

    /// Audio samples spanned by one video frame.
    pub fn samples_per_frame(&self) -> usize {
        self.sample_rate as usize / self.fps
    }

    /// Spectrogram frames of a clip with `samples` samples.
    pub fn mel_frames_for(&self, samples: usize) -> usize {
        samples / self.hop_length + 1
    }

    /// Clip length in seconds.
    pub fn clip_seconds(&self) -> f64 {
        self.frame_count as f64 / self.fps as f64
    }

    /// Tolerance on audio durations, one hop.
    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self::desk()
    }
}
