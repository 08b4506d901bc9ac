//! Shape bookkeeping shared by the model and by the symbolic shape plan.
//!
//! The plan computes every tensor shape the model would produce at a given
//! scale without allocating any parameters, so paper-scale contracts can be
//! checked on a laptop.

use serde::{Deserialize, Serialize};

use super::config::ScaleConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constituent {
    Text,
    AudioSeq,
    AudioProfile,
    Image,
    FaceMask,
    LipMask,
}

impl Constituent {
    pub const ALL: [Constituent; 6] = [
        Constituent::Text,
        Constituent::AudioSeq,
        Constituent::AudioProfile,
        Constituent::Image,
        Constituent::FaceMask,
        Constituent::LipMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Constituent::Text => "f_t",
            Constituent::AudioSeq => "f_AS",
            Constituent::AudioProfile => "f_AP",
            Constituent::Image => "f_i",
            Constituent::FaceMask => "f_fm",
            Constituent::LipMask => "f_lm",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Key(name.to_string()))
    }

    /// Index used for type embeddings.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub which: Constituent,
    pub start: usize,
    pub len: usize,
}

/// Ordered, gap-free spans of a concatenated sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLayout {
    spans: Vec<Span>,
}

impl SpanLayout {
    pub fn new(parts: &[(Constituent, usize)]) -> Self {
        let mut start = 0;
        let spans = parts
            .iter()
            .map(|&(which, len)| {
                let s = Span { which, start, len };
                start += len;
                s
            })
            .collect();
        Self { spans }
    }

    pub fn total(&self) -> usize {
        self.spans.last().map(|s| s.start + s.len).unwrap_or(0)
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn get(&self, which: Constituent) -> Result<Span> {
        self.spans
            .iter()
            .copied()
            .find(|s| s.which == which)
            .ok_or_else(|| Error::Key(which.name().to_string()))
    }

    /// Per-row constituent index, for type embeddings.
    pub fn type_ids(&self) -> Vec<usize> {
        self.spans
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.which.index(), s.len))
            .collect()
    }
}

/// Named shapes of one forward pass at a given scale and text length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapePlan {
    pub text_len: usize,
    pub f_as_in: [usize; 2],
    pub f_ap_in: [usize; 2],
    pub f_t: [usize; 2],
    pub f_i: [usize; 2],
    pub f_fm: [usize; 2],
    pub f_lm: [usize; 2],
    /// `L(f_AS ⊕ f_AP)`.
    pub audio_query: [usize; 2],
    /// `L(f_t ⊕ f_i ⊕ f_lm ⊕ f_fm)`.
    pub audio_kv: [usize; 2],
    /// `L(f_i ⊕ f_fm ⊕ f_lm)`.
    pub visual_query: [usize; 2],
    /// `L(f_t ⊕ f_AS ⊕ f_AP)`.
    pub visual_kv: [usize; 2],
    pub audio_text: [usize; 2],
    pub decoder_prefix: [usize; 2],
    pub video_latent: [usize; 4],
    pub frames: [usize; 4],
}

impl ShapePlan {
    pub fn new(cfg: &ScaleConfig, text_len: usize) -> Result<Self> {
        cfg.validate()?;
        if text_len == 0 {
            return Err(Error::arg("text length must be at least 1"));
        }
        if text_len > cfg.text_max_len {
            return Err(Error::Length {
                len: text_len,
                max: cfg.text_max_len,
            });
        }
        let d = cfg.channels;
        let (vi, vfm, vlm) = cfg.visual_split();
        let (s, p, t, v) = (cfg.audio_seq_len, cfg.audio_profile_len, text_len, cfg.visual_token_len);
        Ok(Self {
            text_len,
            f_as_in: [s, d],
            f_ap_in: [p, d],
            f_t: [t, d],
            f_i: [vi, d],
            f_fm: [vfm, d],
            f_lm: [vlm, d],
            audio_query: [s + p, d],
            audio_kv: [t + v, d],
            visual_query: [v, d],
            visual_kv: [t + s + p, d],
            audio_text: [s + p + t, d],
            decoder_prefix: [s + p + t, d],
            video_latent: [4, cfg.frame_count, cfg.latent_hw, cfg.latent_hw],
            frames: [cfg.frame_count, cfg.image_hw, cfg.image_hw, 3],
        })
    }

    pub fn audio_layout(cfg: &ScaleConfig) -> SpanLayout {
        SpanLayout::new(&[
            (Constituent::AudioSeq, cfg.audio_seq_len),
            (Constituent::AudioProfile, cfg.audio_profile_len),
        ])
    }

    pub fn visual_layout(cfg: &ScaleConfig) -> SpanLayout {
        let (vi, vfm, vlm) = cfg.visual_split();
        SpanLayout::new(&[
            (Constituent::Image, vi),
            (Constituent::FaceMask, vfm),
            (Constituent::LipMask, vlm),
        ])
    }

    pub fn audio_kv_layout(cfg: &ScaleConfig, text_len: usize) -> SpanLayout {
        let (vi, vfm, vlm) = cfg.visual_split();
        SpanLayout::new(&[
            (Constituent::Text, text_len),
            (Constituent::Image, vi),
            (Constituent::LipMask, vlm),
            (Constituent::FaceMask, vfm),
        ])
    }

    pub fn visual_kv_layout(cfg: &ScaleConfig, text_len: usize) -> SpanLayout {
        SpanLayout::new(&[
            (Constituent::Text, text_len),
            (Constituent::AudioSeq, cfg.audio_seq_len),
            (Constituent::AudioProfile, cfg.audio_profile_len),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_plan_shapes() {
        let cfg = ScaleConfig::paper();
        let t = 12;
        let plan = ShapePlan::new(&cfg, t).unwrap();
        assert_eq!(plan.audio_query, [5609, 512]);
        assert_eq!(plan.audio_text, [5609 + t, 512]);
        assert_eq!(plan.visual_query, [3136, 512]);
        assert_eq!(plan.visual_kv, [5609 + t, 512]);
        assert_eq!(plan.video_latent, [4, 500, 64, 64]);
    }

    #[test]
    fn layouts_tile() {
        let cfg = ScaleConfig::desk();
        for layout in [
            ShapePlan::audio_layout(&cfg),
            ShapePlan::visual_layout(&cfg),
            ShapePlan::audio_kv_layout(&cfg, 5),
            ShapePlan::visual_kv_layout(&cfg, 5),
        ] {
            let mut next = 0;
            for s in layout.spans() {
                assert_eq!(s.start, next);
                next += s.len;
            }
            assert_eq!(next, layout.total());
            assert_eq!(layout.type_ids().len(), layout.total());
        }
    }

    #[test]
    fn constituent_names_round_trip() {
        for c in Constituent::ALL {
            assert_eq!(Constituent::from_name(c.name()).unwrap(), c);
        }
        assert!(matches!(Constituent::from_name("f_x"), Err(Error::Key(_))));
    }

    #[test]
    fn text_longer_than_max_is_rejected() {
        let cfg = ScaleConfig::desk();
        assert!(ShapePlan::new(&cfg, cfg.text_max_len + 1).is_err());
        assert!(ShapePlan::new(&cfg, 0).is_err());
    }
}
