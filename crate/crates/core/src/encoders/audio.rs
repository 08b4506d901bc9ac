use stfm_tensor::nn::Linear;
use stfm_tensor::{concat_cols, ParamStore, Rng, Tape, Tensor, Var};

use crate::data_model::{MelSpectrogram, Modality, ScaleConfig, TokenSequence, Waveform};
use crate::data_pipeline::dsp::compute_mel;
use crate::error::{Error, Result};

/// Row-interpolation matrix resampling `from` rows to `to` rows linearly.
pub fn resample_matrix(from: usize, to: usize) -> Tensor {
    let mut m = Tensor::zeros(&[to, from]);
    for i in 0..to {
        let pos = if to == 1 {
            0.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let frac = pos - lo as f64;
        m.data_mut()[i * from + lo] += 1.0 - frac;
        if hi != lo {
            m.data_mut()[i * from + hi] += frac;
        }
    }
    m
}

/// Mel frames to `S` sequence tokens through two stride-2 transposed
/// convolutions and a final linear resampling.
#[derive(Clone, Debug)]
pub struct AudioSequenceEncoder {
    input: Linear,
    up1: Linear,
    up2: Linear,
    out: Linear,
    channels: usize,
    mel_bins: usize,
    seq_len: usize,
}

impl AudioSequenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScaleConfig, rng: &mut Rng) -> Self {
        let d = cfg.channels;
        Self {
            input: Linear::new(store, &format!("{name}.in"), cfg.mel_bins, d, rng),
            up1: Linear::new(store, &format!("{name}.up1"), d, 2 * d, rng),
            up2: Linear::new(store, &format!("{name}.up2"), d, 2 * d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            channels: d,
            mel_bins: cfg.mel_bins,
            seq_len: cfg.audio_seq_len,
        }
    }

    /// Transposed convolution with kernel = stride = 2 along time.
    fn upsample<'t>(&self, tape: &'t Tape, store: &ParamStore, layer: &Linear, x: Var<'t>) -> Var<'t> {
        let rows = x.rows();
        layer.forward(tape, store, x).reshape(&[2 * rows, self.channels])
    }

    /// `features`: frame-major normalized log-mel, `[frames, mel_bins]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: Var<'t>) -> Result<Var<'t>> {
        if features.cols() != self.mel_bins {
            return Err(Error::shape(format!(
                "audio sequence encoder expects {} mel bins, got {}",
                self.mel_bins,
                features.cols()
            )));
        }
        let h = self.input.forward(tape, store, features).gelu();
        let h = self.upsample(tape, store, &self.up1, h).gelu();
        let h = self.upsample(tape, store, &self.up2, h).gelu();
        let resample = tape.constant(resample_matrix(h.rows(), self.seq_len));
        Ok(self.out.forward(tape, store, resample.matmul(h)))
    }

    pub fn encode(&self, store: &ParamStore, mel: &MelSpectrogram) -> Result<TokenSequence> {
        if mel.bins() != self.mel_bins {
            return Err(Error::shape(format!(
                "audio sequence encoder expects {} mel bins, got {}",
                self.mel_bins,
                mel.bins()
            )));
        }
        let tape = Tape::new();
        let y = self.forward(&tape, store, tape.constant(mel.features()))?;
        TokenSequence::new((*y.value()).clone(), Modality::AudioSeq)
    }
}

/// Reference clip to `P` speaker tokens via statistics pooling.
#[derive(Clone, Debug)]
pub struct AudioProfileEncoder {
    frame1: Linear,
    frame2: Linear,
    out: Linear,
    channels: usize,
    profile_len: usize,
}

impl AudioProfileEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScaleConfig, rng: &mut Rng) -> Self {
        let d = cfg.channels;
        Self {
            frame1: Linear::new(store, &format!("{name}.frame1"), cfg.mel_bins, d, rng),
            frame2: Linear::new(store, &format!("{name}.frame2"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), 2 * d, cfg.audio_profile_len * d, rng),
            channels: d,
            profile_len: cfg.audio_profile_len,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: Var<'t>) -> Var<'t> {
        let h = self.frame1.forward(tape, store, features).gelu();
        let h = self.frame2.forward(tape, store, h).gelu();
        let mean = h.mean_rows();
        let n = h.rows() as f64;
        let centered = h.sub(tape.constant(Tensor::ones(&[h.rows(), 1])).matmul(mean));
        let var = tape
            .constant(Tensor::full(&[1, h.rows()], 1.0 / n))
            .matmul(centered.square());
        let std = var.add_scalar(1e-6).sqrt();
        let stats = concat_cols(&[mean, std]);
        self.out
            .forward(tape, store, stats)
            .reshape(&[self.profile_len, self.channels])
    }

    pub fn encode(&self, store: &ParamStore, cfg: &ScaleConfig, reference: &Waveform) -> Result<TokenSequence> {
        reference.check_duration(cfg.reference_seconds, cfg.hop_length)?;
        let mel = compute_mel(reference, cfg.mel_bins, cfg.hop_length, cfg.n_fft)?;
        let tape = Tape::new();
        let y = self.forward(&tape, store, tape.constant(mel.features()));
        TokenSequence::new((*y.value()).clone(), Modality::AudioProfile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfm_tensor::{randn, rng};

    #[test]
    fn resample_endpoints_and_rows_sum_to_one() {
        let m = resample_matrix(5, 9);
        for r in 0..9 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.at2(0, 0), 1.0);
        assert_eq!(m.at2(8, 4), 1.0);
    }

    #[test]
    fn sequence_length_is_fixed_for_any_frame_count() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let enc = AudioSequenceEncoder::new(&mut store, "as", &cfg, &mut rng(0));
        for frames in [50, 100, 101] {
            let tape = Tape::new();
            let x = tape.constant(randn(&[frames, cfg.mel_bins], &mut rng(frames as u64)));
            let y = enc.forward(&tape, &store, x).unwrap();
            assert_eq!(y.shape(), vec![cfg.audio_seq_len, cfg.channels]);
        }
    }

    #[test]
    fn zero_features_with_zero_biases_give_zero_tokens() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let enc = AudioSequenceEncoder::new(&mut store, "as", &cfg, &mut rng(0));
        let tape = Tape::new();
        let y = enc
            .forward(&tape, &store, tape.constant(Tensor::zeros(&[40, cfg.mel_bins])))
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_bin_count_is_a_shape_error() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let enc = AudioSequenceEncoder::new(&mut store, "as", &cfg, &mut rng(0));
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[10, cfg.mel_bins + 1]));
        assert!(matches!(enc.forward(&tape, &store, x), Err(Error::Shape(_))));
    }
}
