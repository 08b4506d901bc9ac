//! The multi-entangled latent space: two cross-modal transformer encoders.
//!
//! The audio stream queries `L(f_AS ⊕ f_AP)` against `L(f_t ⊕ f_i ⊕ f_lm ⊕ f_fm)`;
//! the visual stream queries `L(f_i ⊕ f_fm ⊕ f_lm)` against
//! `L(f_t ⊕ f_AS ⊕ f_AP)`. Text appears only as keys/values in both.

mod attention;
mod block;

pub use attention::{attention_core, cross_attention, MultiHeadAttention};
pub use block::{EntanglementBlock, FeedForward, Stream};

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use stfm_tensor::{concat_rows, ParamStore, Rng, Tape, Tensor, Var};

use crate::data_model::{Constituent, Modality, ScaleConfig, ShapePlan, SpanLayout, TokenSequence};
use crate::error::{Error, Result};

pub const PREFIX: &str = "ent";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// No transformer encoder: both latents are their query inputs.
    None,
    /// One parameter set used by both streams.
    Ste,
    /// Independent parameter sets per stream.
    Ete,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementConfig {
    pub mode: EncoderMode,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    /// Embedding cross-attention inside the denoiser.
    pub use_embedding_cross_attention: bool,
    /// Diffusion cross-attention from video to audio hidden states.
    pub use_diffusion_cross_attention: bool,
    #[serde(default = "yes")]
    pub audio_stream_enabled: bool,
    #[serde(default = "yes")]
    pub visual_stream_enabled: bool,
    #[serde(default = "yes")]
    pub use_audio_seq: bool,
    #[serde(default = "yes")]
    pub use_audio_profile: bool,
    #[serde(default = "yes")]
    pub visual_tokens_in_audio_kv: bool,
}

impl Default for EntanglementConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Ete,
            num_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            use_embedding_cross_attention: true,
            use_diffusion_cross_attention: true,
            audio_stream_enabled: true,
            visual_stream_enabled: true,
            use_audio_seq: true,
            use_audio_profile: true,
            visual_tokens_in_audio_kv: true,
        }
    }
}

impl EntanglementConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_heads == 0 || !channels.is_multiple_of(self.num_heads) {
            return Err(Error::arg(format!(
                "channels {channels} not divisible by {} heads",
                self.num_heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::arg("ffn_mult must be positive"));
        }
        if self.mode != EncoderMode::None && self.num_layers == 0 {
            return Err(Error::arg("a transformer encoder needs at least one layer"));
        }
        Ok(())
    }

    pub fn head_dim(&self, channels: usize) -> usize {
        channels / self.num_heads
    }
}

/// Encoder outputs feeding the entanglement, all `[len, d]`.
#[derive(Clone, Copy)]
pub struct EncodedVars<'t> {
    pub f_as: Var<'t>,
    pub f_ap: Var<'t>,
    pub f_t: Var<'t>,
    pub f_i: Var<'t>,
    pub f_fm: Var<'t>,
    pub f_lm: Var<'t>,
}

/// Stream outputs on the tape.
#[derive(Clone)]
pub struct EntangledVars<'t> {
    pub f_as: Var<'t>,
    pub f_av: Var<'t>,
    pub f_t: Var<'t>,
    pub audio_layout: SpanLayout,
    pub visual_layout: SpanLayout,
    pub attention: Vec<Rc<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Entanglement {
    pub config: EntanglementConfig,
    streams: Vec<Stream>,
    audio: Option<usize>,
    visual: Option<usize>,
    channels: usize,
}

impl Entanglement {
    pub fn new(store: &mut ParamStore, cfg: &ScaleConfig, config: EntanglementConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(cfg.channels)?;
        let d = cfg.channels;
        let max_q = cfg.audio_len().max(cfg.visual_token_len);
        let mut make = |name: &str, rng: &mut Rng| {
            Stream::new(
                store,
                &format!("{PREFIX}.{name}"),
                d,
                max_q,
                config.num_layers,
                config.num_heads,
                config.ffn_mult,
                rng,
            )
        };
        let (streams, audio, visual) = match config.mode {
            EncoderMode::None => (vec![], None, None),
            EncoderMode::Ste => (vec![make("shared", rng)], Some(0), Some(0)),
            EncoderMode::Ete => (vec![make("audio", rng), make("visual", rng)], Some(0), Some(1)),
        };
        let ent = Self {
            audio: audio.filter(|_| config.audio_stream_enabled),
            visual: visual.filter(|_| config.visual_stream_enabled),
            config,
            streams,
            channels: d,
        };
        log::info!(
            "entanglement ({:?}, {} layers): {} trainable parameters",
            ent.config.mode,
            ent.config.num_layers,
            ent.param_count(store)
        );
        Ok(ent)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count_scalars(&format!("{PREFIX}."))
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn audio_stream(&self) -> Option<&Stream> {
        self.audio.map(|i| &self.streams[i])
    }

    pub fn visual_stream(&self) -> Option<&Stream> {
        self.visual.map(|i| &self.streams[i])
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, enc: EncodedVars<'t>) -> Result<EntangledVars<'t>> {
        for (name, v) in [
            ("f_AS", enc.f_as),
            ("f_AP", enc.f_ap),
            ("f_t", enc.f_t),
            ("f_i", enc.f_i),
            ("f_fm", enc.f_fm),
            ("f_lm", enc.f_lm),
        ] {
            if v.cols() != self.channels {
                return Err(Error::shape(format!("{name} has width {}, expected {}", v.cols(), self.channels)));
            }
        }
        let zero_like = |v: Var<'t>| tape.constant(Tensor::zeros(&v.shape()));
        let f_as = if self.config.use_audio_seq { enc.f_as } else { zero_like(enc.f_as) };
        let f_ap = if self.config.use_audio_profile { enc.f_ap } else { zero_like(enc.f_ap) };
        let t = enc.f_t.rows();
        let audio_layout = SpanLayout::new(&[
            (Constituent::AudioSeq, f_as.rows()),
            (Constituent::AudioProfile, f_ap.rows()),
        ]);
        let visual_layout = SpanLayout::new(&[
            (Constituent::Image, enc.f_i.rows()),
            (Constituent::FaceMask, enc.f_fm.rows()),
            (Constituent::LipMask, enc.f_lm.rows()),
        ]);
        let q_a = concat_rows(&[f_as, f_ap]);
        let q_i = concat_rows(&[enc.f_i, enc.f_fm, enc.f_lm]);
        let mut attention = Vec::new();

        let out_a = match self.audio_stream() {
            Some(stream) => {
                let (kv, layout) = if self.config.visual_tokens_in_audio_kv {
                    (
                        concat_rows(&[enc.f_t, enc.f_i, enc.f_lm, enc.f_fm]),
                        SpanLayout::new(&[
                            (Constituent::Text, t),
                            (Constituent::Image, enc.f_i.rows()),
                            (Constituent::LipMask, enc.f_lm.rows()),
                            (Constituent::FaceMask, enc.f_fm.rows()),
                        ]),
                    )
                } else {
                    (enc.f_t, SpanLayout::new(&[(Constituent::Text, t)]))
                };
                let (y, w) = stream.forward(tape, store, q_a, kv, &layout.type_ids(), None, None)?;
                attention.extend(w);
                y
            }
            None => q_a,
        };
        let out_v = match self.visual_stream() {
            Some(stream) => {
                let kv = concat_rows(&[enc.f_t, f_as, f_ap]);
                let layout = SpanLayout::new(&[
                    (Constituent::Text, t),
                    (Constituent::AudioSeq, f_as.rows()),
                    (Constituent::AudioProfile, f_ap.rows()),
                ]);
                let (y, w) = stream.forward(tape, store, q_i, kv, &layout.type_ids(), None, None)?;
                attention.extend(w);
                y
            }
            None => q_i,
        };
        Ok(EntangledVars {
            f_as: out_a,
            f_av: out_v,
            f_t: enc.f_t,
            audio_layout,
            visual_layout,
            attention,
        })
    }
}

/// Entangled outputs with the spans of their constituents.
#[derive(Clone, Debug)]
pub struct EntangledLatent {
    pub f_as: TokenSequence,
    pub f_av: TokenSequence,
    pub f_t: TokenSequence,
    pub audio_layout: SpanLayout,
    pub visual_layout: SpanLayout,
}

impl EntangledLatent {
    pub fn from_vars(v: &EntangledVars<'_>) -> Result<Self> {
        Ok(Self {
            f_as: TokenSequence::new((*v.f_as.value()).clone(), Modality::Fused)?,
            f_av: TokenSequence::new((*v.f_av.value()).clone(), Modality::Fused)?,
            f_t: TokenSequence::new((*v.f_t.value()).clone(), Modality::Text)?,
            audio_layout: v.audio_layout.clone(),
            visual_layout: v.visual_layout.clone(),
        })
    }

    /// Shapes only, for a given scale; no parameters involved.
    pub fn layouts(cfg: &ScaleConfig) -> (SpanLayout, SpanLayout) {
        (ShapePlan::audio_layout(cfg), ShapePlan::visual_layout(cfg))
    }
}

/// The contiguous span of one constituent, by name (`f_AS`, `f_i`, ...).
pub fn split_constituents(latent: &EntangledLatent, which: &str) -> Result<TokenSequence> {
    let c = Constituent::from_name(which)?;
    match c {
        Constituent::Text => Ok(latent.f_t.clone()),
        Constituent::AudioSeq | Constituent::AudioProfile => {
            let s = latent.audio_layout.get(c)?;
            latent.f_as.slice(s.start, s.len)
        }
        Constituent::Image | Constituent::FaceMask | Constituent::LipMask => {
            let s = latent.visual_layout.get(c)?;
            latent.f_av.slice(s.start, s.len)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfm_tensor::{randn, rng};

    fn small_cfg() -> ScaleConfig {
        ScaleConfig {
            channels: 8,
            audio_seq_len: 5,
            audio_profile_len: 2,
            visual_token_len: 16,
            ..ScaleConfig::desk()
        }
    }

    fn inputs<'t>(tape: &'t Tape, cfg: &ScaleConfig, seed: u64) -> EncodedVars<'t> {
        let mut r = rng(seed);
        let d = cfg.channels;
        let (vi, vfm, vlm) = cfg.visual_split();
        let mut m = |n: usize| tape.constant(randn(&[n, d], &mut r));
        EncodedVars {
            f_as: m(cfg.audio_seq_len),
            f_ap: m(cfg.audio_profile_len),
            f_t: m(3),
            f_i: m(vi),
            f_fm: m(vfm),
            f_lm: m(vlm),
        }
    }

    #[test]
    fn ete_has_twice_the_block_parameters_of_ste() {
        let cfg = small_cfg();
        let mut s1 = ParamStore::new();
        let ste = Entanglement::new(&mut s1, &cfg, EntanglementConfig { mode: EncoderMode::Ste, ..Default::default() }, &mut rng(0)).unwrap();
        let mut s2 = ParamStore::new();
        let ete = Entanglement::new(&mut s2, &cfg, EntanglementConfig::default(), &mut rng(0)).unwrap();
        assert_eq!(ete.param_count(&s2), 2 * ste.param_count(&s1));
        assert!(ste.param_count(&s1) < ete.param_count(&s2));
    }

    #[test]
    fn shared_stream_gives_identical_outputs_for_identical_inputs() {
        let cfg = ScaleConfig {
            audio_seq_len: 6,
            audio_profile_len: 2,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let ent = Entanglement::new(&mut store, &cfg, EntanglementConfig { mode: EncoderMode::Ste, ..Default::default() }, &mut rng(0)).unwrap();
        let tape = Tape::new();
        let q = tape.constant(randn(&[8, cfg.channels], &mut rng(1)));
        let kv = tape.constant(randn(&[5, cfg.channels], &mut rng(2)));
        let types = vec![0; 5];
        let (a, _) = ent.audio_stream().unwrap().forward(&tape, &store, q, kv, &types, None, None).unwrap();
        let (b, _) = ent.visual_stream().unwrap().forward(&tape, &store, q, kv, &types, None, None).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn zeroed_output_projections_pass_queries_through() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let ent = Entanglement::new(&mut store, &cfg, EntanglementConfig::default(), &mut rng(0)).unwrap();
        for s in ent.streams() {
            for b in &s.blocks {
                for p in b.output_projections() {
                    store.value_mut(p.weight).scale_in_place(0.0);
                }
            }
        }
        let tape = Tape::new();
        let enc = inputs(&tape, &cfg, 4);
        let out = ent.forward(&tape, &store, enc).unwrap();
        let q_a = concat_rows(&[enc.f_as, enc.f_ap]);
        assert_eq!(out.f_as.value(), q_a.value());
    }

    #[test]
    fn split_tiles_and_inverts_concat() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let ent = Entanglement::new(&mut store, &cfg, EntanglementConfig { mode: EncoderMode::None, ..Default::default() }, &mut rng(0)).unwrap();
        let tape = Tape::new();
        let enc = inputs(&tape, &cfg, 5);
        let lat = EntangledLatent::from_vars(&ent.forward(&tape, &store, enc).unwrap()).unwrap();
        assert_eq!(split_constituents(&lat, "f_AP").unwrap().data(), &*enc.f_ap.value());
        assert_eq!(split_constituents(&lat, "f_lm").unwrap().data(), &*enc.f_lm.value());
        assert!(matches!(split_constituents(&lat, "f_q"), Err(Error::Key(_))));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let ent = Entanglement::new(&mut store, &cfg, EntanglementConfig::default(), &mut rng(0)).unwrap();
        let tape = Tape::new();
        let out = ent.forward(&tape, &store, inputs(&tape, &cfg, 6)).unwrap();
        assert_eq!(out.attention.len(), 2 * 2 * 2 * 4);
        for w in &out.attention {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
