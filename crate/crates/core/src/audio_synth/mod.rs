//! Decoder-only autoregressive mel synthesizer and the vocoder front.

use std::rc::Rc;

use stfm_tensor::nn::{Embedding, LayerNorm, Linear};
use stfm_tensor::{concat_rows, Mask, ParamStore, Rng, Tape, Tensor, Var};

use crate::data_model::{Constituent, MelSpectrogram, Modality, ScaleConfig, SpanLayout, TokenSequence, Waveform};
use crate::data_pipeline::dsp::{GriffinLim, Vocoder};
use crate::entanglement::{EntangledLatent, FeedForward, MultiHeadAttention};
use crate::error::{Error, Result};

pub const PREFIX: &str = "audio";

/// Stop fires when `sigmoid(logit) > STOP_THRESHOLD`.
pub const STOP_THRESHOLD: f64 = 0.5;

/// Stop is ignored before this many frames; one frame vocodes to no samples.
pub const MIN_GENERATED_FRAMES: usize = 2;

/// Segment ids added to prefix rows.
const SEG_AUDIO_SEQ: usize = 0;
const SEG_AUDIO_PROFILE: usize = 1;
const SEG_TEXT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramTokenStream {
    /// Normalized log-mel features, `[frames, mel_bins]`.
    pub frames: Tensor,
    pub stop_flags: Vec<bool>,
}

impl SpectrogramTokenStream {
    pub fn len(&self) -> usize {
        self.stop_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop_flags.is_empty()
    }

    pub fn stopped(&self) -> bool {
        self.stop_flags.last().copied().unwrap_or(false)
    }

    pub fn to_mel(&self, cfg: &ScaleConfig) -> Result<MelSpectrogram> {
        MelSpectrogram::from_features(&self.frames, cfg.sample_rate, cfg.hop_length)
    }
}

/// Outputs of a teacher-forced pass; row `t` of each belongs to target `t`.
#[derive(Clone, Copy)]
pub struct TeacherForced<'t> {
    pub frames: Var<'t>,
    pub stop_logits: Var<'t>,
    /// Final-layer hidden states, the diffusion cross-attention context.
    pub hidden: Var<'t>,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 4, rng),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
        let h = self.ln_attn.forward(tape, store, x);
        let (a, _) = self.attn.forward(tape, store, h, h, h, Some(mask), None)?;
        let x = x.add(a);
        let h = self.ln_ffn.forward(tape, store, x);
        Ok(x.add(self.ffn.forward(tape, store, h)))
    }
}

#[derive(Clone, Debug)]
pub struct AudioSynthesizer {
    segments: Embedding,
    prefix_pos: Embedding,
    audio_pos: Embedding,
    bos: Embedding,
    prenet_in: Linear,
    prenet_out: Linear,
    blocks: Vec<DecoderBlock>,
    ln_out: LayerNorm,
    frame_head: Linear,
    stop_head: Linear,
    mel_bins: usize,
    max_frames: usize,
    max_prefix: usize,
}

/// Prefix rows attend to the whole prefix; target rows to the prefix and
/// to targets at or before their own position.
pub fn prefix_causal_mask(prefix: usize, targets: usize) -> Mask {
    let n = prefix + targets;
    let data: Vec<bool> = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            c < prefix || c <= r
        })
        .collect();
    Mask::Full(Rc::from(data))
}

impl AudioSynthesizer {
    pub fn new(store: &mut ParamStore, cfg: &ScaleConfig, layers: usize, heads: usize, rng: &mut Rng) -> Self {
        let d = cfg.channels;
        let max_prefix = cfg.audio_len() + cfg.text_max_len;
        Self {
            segments: Embedding::new(store, &format!("{PREFIX}.segments"), 3, d, 0.1, rng),
            prefix_pos: Embedding::new(store, &format!("{PREFIX}.prefix_pos"), max_prefix, d, 0.02, rng),
            audio_pos: Embedding::new(store, &format!("{PREFIX}.pos"), cfg.max_audio_frames, d, 0.1, rng),
            bos: Embedding::new(store, &format!("{PREFIX}.bos"), 1, d, 0.1, rng),
            prenet_in: Linear::new(store, &format!("{PREFIX}.prenet_in"), cfg.mel_bins, d, rng),
            prenet_out: Linear::new(store, &format!("{PREFIX}.prenet_out"), d, d, rng),
            blocks: (0..layers)
                .map(|l| DecoderBlock::new(store, &format!("{PREFIX}.block{l}"), d, heads, rng))
                .collect(),
            ln_out: LayerNorm::new(store, &format!("{PREFIX}.ln_out"), d),
            frame_head: Linear::new(store, &format!("{PREFIX}.frame_head"), d, cfg.mel_bins, rng),
            stop_head: Linear::new(store, &format!("{PREFIX}.stop_head"), d, 1, rng),
            mel_bins: cfg.mel_bins,
            max_frames: cfg.max_audio_frames,
            max_prefix,
        }
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    /// `[f_AS | f_AP | f_t]` with segment and position embeddings added.
    pub fn build_prefix<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        speaker: Var<'t>,
        speaker_layout: &SpanLayout,
        text: Var<'t>,
    ) -> Result<Var<'t>> {
        let seq = speaker_layout.get(Constituent::AudioSeq)?;
        let prof = speaker_layout.get(Constituent::AudioProfile)?;
        if speaker.rows() != speaker_layout.total() {
            return Err(Error::shape(format!(
                "speaker tokens have {} rows, layout expects {}",
                speaker.rows(),
                speaker_layout.total()
            )));
        }
        if text.rows() == 0 {
            return Err(Error::arg("empty text slice; text drives generation"));
        }
        let f_as = speaker.slice_rows(seq.start, seq.len);
        let f_ap = speaker.slice_rows(prof.start, prof.len);
        let n = seq.len + prof.len + text.rows();
        if n > self.max_prefix {
            return Err(Error::Length { len: n, max: self.max_prefix });
        }
        let ids: Vec<usize> = std::iter::repeat_n(SEG_AUDIO_SEQ, seq.len)
            .chain(std::iter::repeat_n(SEG_AUDIO_PROFILE, prof.len))
            .chain(std::iter::repeat_n(SEG_TEXT, text.rows()))
            .collect();
        let x = concat_rows(&[f_as, f_ap, text]);
        Ok(x.add(self.segments.forward(tape, store, &ids))
            .add(self.prefix_pos.prefix(tape, store, n)))
    }

    /// Prefix as a plain token sequence, from an entangled latent.
    pub fn conditioning_prefix(&self, store: &ParamStore, latent: &EntangledLatent) -> Result<TokenSequence> {
        let tape = Tape::new();
        let speaker = tape.constant(latent.f_as.data().clone());
        let text = tape.constant(latent.f_t.data().clone());
        let p = self.build_prefix(&tape, store, speaker, &latent.audio_layout, text)?;
        TokenSequence::new((*p.value()).clone(), Modality::Fused)
    }

    fn embed_frames<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: Var<'t>) -> Var<'t> {
        let h = self.prenet_in.forward(tape, store, frames).gelu();
        self.prenet_out.forward(tape, store, h)
    }

    fn run<'t>(&self, tape: &'t Tape, store: &ParamStore, prefix: Var<'t>, inputs: Option<Var<'t>>, n: usize) -> Result<Var<'t>> {
        let bos = self.bos.prefix(tape, store, 1);
        let audio = match inputs {
            Some(f) => concat_rows(&[bos, self.embed_frames(tape, store, f)]),
            None => bos,
        };
        let audio = audio.add(self.audio_pos.prefix(tape, store, n));
        let p = prefix.rows();
        let mask = prefix_causal_mask(p, n);
        let mut x = concat_rows(&[prefix, audio]);
        for b in &self.blocks {
            x = b.forward(tape, store, x, &mask)?;
        }
        Ok(self.ln_out.forward(tape, store, x.slice_rows(p, n)))
    }

    /// Predicts every target frame from the prefix and the targets before it.
    /// `targets` are normalized features `[n, mel_bins]`; `input_noise`, when
    /// given, perturbs the shifted inputs only.
    pub fn teacher_forced<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        prefix: Var<'t>,
        targets: &Tensor,
        input_noise: Option<&Tensor>,
    ) -> Result<TeacherForced<'t>> {
        let s = targets.shape();
        if s.len() != 2 || s[1] != self.mel_bins {
            return Err(Error::shape(format!("targets {s:?}, expected [n, {}]", self.mel_bins)));
        }
        let n = s[0];
        if n == 0 {
            return Err(Error::arg("no target frames"));
        }
        if n > self.max_frames {
            return Err(Error::Length { len: n, max: self.max_frames });
        }
        let inputs = if n > 1 {
            let mut shifted = targets.slice_rows(0, n - 1)?;
            if let Some(noise) = input_noise {
                shifted.add_assign(&noise.slice_rows(0, n - 1)?);
            }
            Some(tape.constant(shifted))
        } else {
            None
        };
        let hidden = self.run(tape, store, prefix, inputs, n)?;
        Ok(TeacherForced {
            frames: self.frame_head.forward(tape, store, hidden),
            stop_logits: self.stop_head.forward(tape, store, hidden),
            hidden,
        })
    }

    /// Greedy decoding; the frame at which stop fires is the last one kept.
    pub fn generate(&self, store: &ParamStore, prefix: &Tensor, max_frames: usize) -> Result<SpectrogramTokenStream> {
        if max_frames == 0 {
            return Err(Error::arg("max_frames must be positive"));
        }
        let limit = max_frames.min(self.max_frames);
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let mut stop_flags = Vec::new();
        while frames.len() < limit {
            let tape = Tape::new();
            let p = tape.constant(prefix.clone());
            let n = frames.len() + 1;
            let inputs = if frames.is_empty() {
                None
            } else {
                Some(tape.constant(Tensor::from_rows(&frames)?))
            };
            let hidden = self.run(&tape, store, p, inputs, n)?;
            let last = hidden.slice_rows(n - 1, 1);
            let frame = self.frame_head.forward(&tape, store, last).value();
            let logit = self.stop_head.forward(&tape, store, last).value().data()[0];
            if !frame.is_finite() || !logit.is_finite() {
                return Err(Error::NonFinite(format!("generated frame {}", n - 1)));
            }
            frames.push(frame.data().to_vec());
            let stop = frames.len() >= MIN_GENERATED_FRAMES && 1.0 / (1.0 + (-logit).exp()) > STOP_THRESHOLD;
            stop_flags.push(stop);
            if stop {
                break;
            }
        }
        Ok(SpectrogramTokenStream {
            frames: Tensor::from_rows(&frames)?,
            stop_flags,
        })
    }

    /// Hidden states for `frames` under teacher forcing, no gradients.
    pub fn context(&self, store: &ParamStore, prefix: &Tensor, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.constant(prefix.clone());
        let out = self.teacher_forced(&tape, store, p, frames, None)?;
        Ok((*out.hidden.value()).clone())
    }
}

/// Stop targets: 0 everywhere except 1 on the last frame.
pub fn stop_targets(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 1], |i| if i + 1 == n { 1.0 } else { 0.0 })
}

/// Mean binary cross-entropy of stop logits against [`stop_targets`].
pub fn stop_loss<'t>(logits: Var<'t>) -> Var<'t> {
    let n = logits.rows();
    let y = logits.tape().constant(stop_targets(n));
    // softplus(x) - y*x
    logits.softplus().sub(logits.mul(y)).mean()
}

/// Vocoder decode with the default phase reconstruction.
pub fn vocoder_decode(mel: &MelSpectrogram, n_fft: usize) -> Result<Waveform> {
    GriffinLim::new(n_fft).decode(mel)
}
