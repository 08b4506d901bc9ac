//! The five input encoders and the text tokenizer.

mod audio;
pub mod bpe;
pub mod landmarks;
mod text;
mod visual;

pub use audio::{resample_matrix, AudioProfileEncoder, AudioSequenceEncoder};
pub use bpe::Bpe;
pub use landmarks::{AnalyticLandmarks, EmptyLandmarks, FaceMasks, LandmarkProvider, PixelLandmarks};
pub use text::{tokenize, TextEncoder, TextTokens};
pub use visual::{
    kl_divergence, pool_mask, reparameterize, resample_2d, AppearanceEncoder, AppearanceLatent, StructureEncoder,
    AE_WIDTH,
};

use stfm_tensor::{ParamStore, Rng};

use crate::data_model::ScaleConfig;

pub const AUDIO_SEQ: &str = "enc.audio_seq";
pub const AUDIO_PROFILE: &str = "enc.audio_profile";
pub const TEXT: &str = "enc.text";
pub const VISUAL_APP: &str = "enc.visual_app";
pub const VISUAL_STRUCT: &str = "enc.visual_struct";
/// Parameters of the appearance autoencoder proper (frozen after pretraining).
pub const VISUAL_AE: &str = "enc.visual_app.ae.";

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub audio_seq: AudioSequenceEncoder,
    pub audio_profile: AudioProfileEncoder,
    pub text: TextEncoder,
    pub visual_app: AppearanceEncoder,
    pub visual_struct: StructureEncoder,
    pub bpe: Bpe,
}

impl EncoderBundle {
    pub fn new(store: &mut ParamStore, cfg: &ScaleConfig, bpe: Bpe, rng: &mut Rng) -> Self {
        Self {
            audio_seq: AudioSequenceEncoder::new(store, AUDIO_SEQ, cfg, rng),
            audio_profile: AudioProfileEncoder::new(store, AUDIO_PROFILE, cfg, rng),
            text: TextEncoder::new(store, TEXT, cfg, bpe.vocab_size(), rng),
            visual_app: AppearanceEncoder::new(store, VISUAL_APP, cfg, rng),
            visual_struct: StructureEncoder::new(store, VISUAL_STRUCT, cfg, rng),
            bpe,
        }
    }

    /// Scalar parameter count of each encoder.
    pub fn param_counts(store: &ParamStore) -> Vec<(&'static str, usize)> {
        [AUDIO_SEQ, AUDIO_PROFILE, TEXT, VISUAL_APP, VISUAL_STRUCT]
            .into_iter()
            .map(|p| (p, store.count_scalars(&format!("{p}."))))
            .collect()
    }
}
