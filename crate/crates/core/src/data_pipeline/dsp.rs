//! Short-time Fourier analysis, mel filterbanks and Griffin-Lim inversion.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use stfm_tensor::Tensor;

use crate::data_model::{MelSpectrogram, Waveform, MEL_FLOOR};
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft/2 + 1)`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Tensor,
    /// Centre frequency of each filter in Hz.
    pub centers: Vec<f64>,
    pub sample_rate: u32,
    pub n_fft: usize,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let n_bins = n_fft / 2 + 1;
        let fmax = sample_rate as f64 / 2.0;
        let (mmin, mmax) = (hz_to_mel(0.0), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mmin + (mmax - mmin) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut w = Tensor::zeros(&[n_mels, n_bins]);
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = w.row_mut(m);
            for (k, v) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *v = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
        }
        Self {
            weights: w,
            centers: edges[1..=n_mels].to_vec(),
            sample_rate,
            n_fft,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Index of the filter whose centre is closest to `hz`.
    pub fn bin_for_hz(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if (c - hz).abs() < (self.centers[best] - hz).abs() {
                best = i;
            }
        }
        best
    }

    /// Moore-Penrose pseudo-inverse, `(n_fft/2 + 1) x n_mels`.
    pub fn pseudo_inverse(&self) -> Tensor {
        let (m, k) = (self.weights.shape()[0], self.weights.shape()[1]);
        let mat = DMatrix::from_row_slice(m, k, self.weights.data());
        let pinv = mat
            .pseudo_inverse(1e-10)
            .expect("pseudo-inverse of a finite matrix");
        let mut out = Tensor::zeros(&[k, m]);
        for r in 0..k {
            for c in 0..m {
                out.data_mut()[r * m + c] = pinv[(r, c)];
            }
        }
        out
    }
}

/// Centred STFT with zero padding; frames = `len / hop + 1`.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Magnitude normalization so a unit-amplitude sinusoid peaks at 1.
    pub fn scale(&self) -> f64 {
        2.0 / self.window.iter().sum::<f64>()
    }

    /// Complex spectra, one `n_fft/2 + 1` vector per frame.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let half = self.n_fft / 2;
        let frames = self.frames_for(x.len());
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = (t * self.hop) as isize - half as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let j = start + i as isize;
                let v = if j >= 0 && (j as usize) < x.len() { x[j as usize] } else { 0.0 };
                *b = Complex64::new(v * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..=half].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse producing `len` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = self.n_fft / 2;
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (t, spec) in spectra.iter().enumerate() {
            for k in 0..=half {
                buf[k] = spec[k];
            }
            for k in half + 1..self.n_fft {
                buf[k] = spec[self.n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = (t * self.hop) as isize - half as isize;
            for i in 0..self.n_fft {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < len {
                    let w = self.window[i];
                    acc[j as usize] += buf[i].re / self.n_fft as f64 * w;
                    norm[j as usize] += w * w;
                }
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(a, n)| if *n > 1e-8 { a / n } else { 0.0 })
            .collect()
    }
}

/// Mel spectrogram of `wave`; magnitudes are floored at [`MEL_FLOOR`].
pub fn compute_mel(wave: &Waveform, mel_bins: usize, hop: usize, n_fft: usize) -> Result<MelSpectrogram> {
    if wave.is_empty() {
        return Err(Error::arg("cannot compute a spectrogram of an empty waveform"));
    }
    let stft = Stft::new(n_fft, hop);
    let fb = MelFilterbank::new(wave.sample_rate, n_fft, mel_bins);
    let spectra = stft.analyze(&wave.samples);
    let scale = stft.scale();
    let frames = spectra.len();
    let n_bins = n_fft / 2 + 1;
    let mut mag = Tensor::zeros(&[n_bins, frames]);
    for (t, spec) in spectra.iter().enumerate() {
        for (k, c) in spec.iter().enumerate() {
            mag.data_mut()[k * frames + t] = c.norm() * scale;
        }
    }
    let mel = fb.weights.matmul(&mag)?.map(|v| v.max(MEL_FLOOR));
    MelSpectrogram::new(mel, wave.sample_rate, hop, wave.duration_s())
}

/// Spectrogram-to-waveform decoder.
pub trait Vocoder {
    fn decode(&self, mel: &MelSpectrogram) -> Result<Waveform>;
}

/// Pseudo-inverse mel projection followed by Griffin-Lim phase recovery.
#[derive(Clone, Debug)]
pub struct GriffinLim {
    pub n_fft: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl GriffinLim {
    pub fn new(n_fft: usize) -> Self {
        Self {
            n_fft,
            iterations: 32,
            seed: 0,
        }
    }
}

impl Vocoder for GriffinLim {
    fn decode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.frames() == 0 {
            return Err(Error::arg("cannot vocode a zero-frame spectrogram"));
        }
        let stft = Stft::new(self.n_fft, mel.hop_length);
        let fb = MelFilterbank::new(mel.sample_rate, self.n_fft, mel.bins());
        let lin = fb
            .pseudo_inverse()
            .matmul(mel.magnitudes())?
            .map(|v| v.max(0.0) / stft.scale());
        let (n_bins, frames) = (lin.shape()[0], lin.shape()[1]);
        let len = (frames - 1) * mel.hop_length;
        let target = |t: usize, k: usize| lin.data()[k * frames + t];
        let mut rng = stfm_tensor::rng(self.seed);
        let mut spectra: Vec<Vec<Complex64>> = (0..frames)
            .map(|t| {
                (0..n_bins)
                    .map(|k| Complex64::from_polar(target(t, k), rng.random_range(0.0..2.0 * PI)))
                    .collect()
            })
            .collect();
        let mut wave = stft.synthesize(&spectra, len);
        for _ in 0..self.iterations {
            let est = stft.analyze(&wave);
            for (t, frame) in spectra.iter_mut().enumerate() {
                for (k, c) in frame.iter_mut().enumerate() {
                    let e = est[t][k];
                    let phase = if e.norm() > 1e-12 { e / e.norm() } else { Complex64::new(1.0, 0.0) };
                    *c = phase * target(t, k);
                }
            }
            wave = stft.synthesize(&spectra, len);
        }
        Waveform::new(wave, mel.sample_rate)
    }
}

/// RMS of consecutive `frame_len`-sample windows, `count` values.
pub fn frame_rms(samples: &[f64], frame_len: usize, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| {
            let lo = (k * frame_len).min(samples.len());
            let hi = ((k + 1) * frame_len).min(samples.len());
            if hi == lo {
                return 0.0;
            }
            (samples[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64).sqrt()
        })
        .collect()
}

/// Orthonormal DCT-II of `x`.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            s * norm
        })
        .collect()
}

pub fn tone(freq: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin())
        .collect();
    Waveform {
        samples,
        sample_rate,
    }
}

/// Dominant frequency of `x` from a zero-padded FFT.
pub fn peak_frequency(x: &[f64], sample_rate: u32) -> f64 {
    let n = x.len().next_power_of_two() * 2;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (best, _) = buf[1..n / 2]
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, c)| if c.norm() > acc.1 { (i + 1, c.norm()) } else { acc });
    best as f64 * sample_rate as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_matches_formula() {
        let w = Waveform::new(vec![0.1; 16_000], 8000).unwrap();
        let m = compute_mel(&w, 32, 160, 512).unwrap();
        assert_eq!(m.frames(), 16_000 / 160 + 1);
        assert_eq!(m.bins(), 32);
    }

    #[test]
    fn tone_energy_lands_in_its_bin() {
        let w = tone(440.0, 0.5, 1.0, 8000);
        let m = compute_mel(&w, 32, 160, 512).unwrap();
        let fb = MelFilterbank::new(8000, 512, 32);
        let t = m.frames() / 2;
        let col: Vec<f64> = (0..32).map(|b| m.magnitudes().at2(b, t)).collect();
        let argmax = (0..32).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert!(argmax.abs_diff(fb.bin_for_hz(440.0)) <= 1, "{argmax}");
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], 8000).unwrap();
        let m = compute_mel(&w, 16, 160, 512).unwrap();
        assert!(m.log().data().iter().all(|&v| v == MEL_FLOOR.ln()));
    }

    #[test]
    fn empty_wave_is_rejected() {
        let w = Waveform::new(vec![], 8000).unwrap();
        assert!(compute_mel(&w, 16, 160, 512).is_err());
    }

    #[test]
    fn stft_round_trip() {
        let w = tone(300.0, 0.4, 0.5, 8000);
        let stft = Stft::new(512, 160);
        let back = stft.synthesize(&stft.analyze(&w.samples), w.len());
        let err = back
            .iter()
            .zip(&w.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn dct_is_orthonormal() {
        let x = [0.3, -1.0, 2.0, 0.5];
        let y = dct2(&x);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().map(|v| v * v).sum();
        assert!((ex - ey).abs() < 1e-12);
    }
}
