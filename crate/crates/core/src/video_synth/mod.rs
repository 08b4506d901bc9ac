//! Latent video diffusion: schedule, conditional denoiser, implicit sampler
//! and frame decoder.

mod decoder;
mod denoiser;
mod schedule;

pub use decoder::{absolute_latents, decode_frames, frames_last_to_grid, grid_to_frames_last, FrameDecoder};
pub use denoiser::{identity_patches, patchify, unpatchify, Denoiser, DenoiserConfig, PATCH_DIM};
pub use schedule::{
    ddim_update, denoise_step, forward_diffuse, reverse_from, sample_latents, EpsPredictor, NoiseSchedule,
};

use stfm_tensor::{ParamStore, Rng, Tensor};

use crate::data_model::{Image, ScaleConfig, VideoLatentGrid};
use crate::error::Result;

pub const DENOISER: &str = "video.denoiser";
pub const DECODER: &str = "video.decoder";

/// Desk diffusion defaults: the 1000-step linear schedule (1e-4 to 0.02)
/// stretched onto 100 steps, so that `alpha_bar(T)` is near zero.
pub const DIFFUSION_STEPS: usize = 100;
pub const BETA_START: f64 = 1e-3;
pub const BETA_END: f64 = 0.2;

/// Denoiser with its conditioning bound, as a sampler oracle.
pub struct ConditionedDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub store: &'a ParamStore,
    pub identity: &'a Tensor,
    pub f_av: &'a Tensor,
    pub audio_context: Option<&'a Tensor>,
}

impl EpsPredictor for ConditionedDenoiser<'_> {
    fn predict_eps(&self, x_t: &VideoLatentGrid, t: usize) -> Result<Tensor> {
        self.denoiser
            .predict(self.store, x_t, t, self.identity, self.f_av, self.audio_context)
    }
}

#[derive(Clone, Debug)]
pub struct VideoSynthesizer {
    pub denoiser: Denoiser,
    pub decoder: FrameDecoder,
    pub schedule: NoiseSchedule,
    /// Multiplier applied to latent offsets from the identity latent.
    pub latent_scale: f64,
}

impl VideoSynthesizer {
    pub fn new(store: &mut ParamStore, cfg: &ScaleConfig, config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            denoiser: Denoiser::new(store, DENOISER, cfg, config, rng)?,
            decoder: FrameDecoder::new(store, DECODER, rng),
            schedule: NoiseSchedule::linear(DIFFUSION_STEPS, BETA_START, BETA_END)?,
            latent_scale: 1.0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sample_video_latents(
        &self,
        store: &ParamStore,
        identity: &Tensor,
        f_av: &Tensor,
        audio_context: Option<&Tensor>,
        frames: usize,
        steps: usize,
        seed: u64,
    ) -> Result<VideoLatentGrid> {
        let model = ConditionedDenoiser {
            denoiser: &self.denoiser,
            store,
            identity,
            f_av,
            audio_context,
        };
        sample_latents(&model, frames, self.denoiser.latent_hw(), steps, seed, &self.schedule)
    }

    pub fn decode_frames(&self, store: &ParamStore, latents: &VideoLatentGrid, identity: &Tensor) -> Result<Vec<Image>> {
        decode_frames(&self.decoder, store, latents, identity, self.latent_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use stfm_tensor::{randn, rng};

    fn small() -> ScaleConfig {
        ScaleConfig {
            channels: 16,
            latent_hw: 4,
            image_hw: 32,
            ..ScaleConfig::desk()
        }
    }

    fn build(ec: bool, dc: bool) -> (ScaleConfig, ParamStore, VideoSynthesizer) {
        let cfg = small();
        let mut store = ParamStore::new();
        let dc_cfg = DenoiserConfig {
            width: 8,
            mid_width: 16,
            heads: 2,
            use_ec: ec,
            use_dc: dc,
            ..Default::default()
        };
        let v = VideoSynthesizer::new(&mut store, &cfg, dc_cfg, &mut rng(5)).unwrap();
        (cfg, store, v)
    }

    fn inputs() -> (VideoLatentGrid, Tensor, Tensor, Tensor) {
        let x = VideoLatentGrid::new(randn(&[4, 3, 4, 4], &mut rng(1))).unwrap();
        let id = randn(&[4, 4, 4], &mut rng(2));
        let fav = randn(&[6, 16], &mut rng(3));
        let ctx = randn(&[7, 16], &mut rng(4));
        (x, id, fav, ctx)
    }

    #[test]
    fn gating_makes_outputs_blind_to_disabled_inputs() {
        let (x, id, fav, ctx) = inputs();
        let fav2 = fav.map(|v| v + 1.0);
        let ctx2 = ctx.map(|v| -v);

        let (_, store, v) = build(false, false);
        let a = v.denoiser.predict(&store, &x, 40, &id, &fav, Some(&ctx)).unwrap();
        let b = v.denoiser.predict(&store, &x, 40, &id, &fav2, None).unwrap();
        assert_eq!(a, b);

        let (_, store, v) = build(true, false);
        let a = v.denoiser.predict(&store, &x, 40, &id, &fav, Some(&ctx)).unwrap();
        let b = v.denoiser.predict(&store, &x, 40, &id, &fav, Some(&ctx2)).unwrap();
        let c = v.denoiser.predict(&store, &x, 40, &id, &fav2, Some(&ctx)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let (_, store, v) = build(false, true);
        let a = v.denoiser.predict(&store, &x, 40, &id, &fav, Some(&ctx)).unwrap();
        let b = v.denoiser.predict(&store, &x, 40, &id, &fav2, Some(&ctx)).unwrap();
        let c = v.denoiser.predict(&store, &x, 40, &id, &fav, Some(&ctx2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dc_without_context_is_a_dependency_error() {
        let (x, id, fav, _) = inputs();
        let (_, store, v) = build(true, true);
        let err = v.denoiser.predict(&store, &x, 10, &id, &fav, None).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }

    #[test]
    fn sampling_keeps_shape_and_is_seeded() {
        let (_, id, fav, ctx) = inputs();
        let (_, store, v) = build(true, true);
        let a = v.sample_video_latents(&store, &id, &fav, Some(&ctx), 3, 4, 11).unwrap();
        let b = v.sample_video_latents(&store, &id, &fav, Some(&ctx), 3, 4, 11).unwrap();
        assert_eq!(a.data().shape(), &[4, 3, 4, 4]);
        assert_eq!(a, b);
        let frames = v.decode_frames(&store, &a, &id).unwrap();
        assert_eq!(frames.len(), 3);
    }

    #[test]
    fn desk_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::linear(DIFFUSION_STEPS, BETA_START, BETA_END).unwrap();
        let ab = s.alpha_bar(DIFFUSION_STEPS);
        assert!(ab < 1e-4, "alpha_bar(T) = {ab}");
        let thousand = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((ab.ln() / thousand.alpha_bar(1000).ln() - 1.0).abs() < 0.1);
    }

    #[test]
    fn desk_latent_shape_is_preserved() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let den = Denoiser::new(&mut store, "d", &cfg, DenoiserConfig::default(), &mut rng(0)).unwrap();
        let x = VideoLatentGrid::new(randn(&[4, 8, 8, 8], &mut rng(1))).unwrap();
        let id = Tensor::zeros(&[8, 8, 4]);
        let fav = randn(&[cfg.visual_token_len, cfg.channels], &mut rng(2));
        let ctx = randn(&[17, cfg.channels], &mut rng(3));
        let eps = den.predict(&store, &x, 50, &id, &fav, Some(&ctx)).unwrap();
        assert_eq!(eps.shape(), &[4, 8, 8, 8]);
        assert!(eps.is_finite());
    }
}
