//! The assembled model: encoders, entanglement, audio and video synthesizers.

use serde::{Deserialize, Serialize};
use stfm_tensor::{randn, ParamStore, Rng, Tape, Tensor, Var};

use crate::audio_synth::{stop_loss, AudioSynthesizer, SpectrogramTokenStream};
use crate::data_model::{Image, MelSpectrogram, Sample, ScaleConfig, VideoLatentGrid, Waveform};
use crate::data_pipeline::dsp::{compute_mel, GriffinLim, Vocoder};
use crate::encoders::{
    tokenize, AnalyticLandmarks, Bpe, EncoderBundle, LandmarkProvider, PixelLandmarks, VISUAL_AE,
};
use crate::entanglement::{EncodedVars, EntangledLatent, EntangledVars, Entanglement, EntanglementConfig};
use crate::error::{Error, Result};
use crate::video_synth::{forward_diffuse, frames_last_to_grid, patchify, DenoiserConfig, VideoSynthesizer};

fn default_steps() -> usize {
    25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: ScaleConfig,
    pub entanglement: EntanglementConfig,
    pub denoiser: DenoiserConfig,
    pub audio_layers: usize,
    pub audio_heads: usize,
    pub bpe_merges: usize,
    /// Sampler steps used by [`StfmModel::generate`].
    #[serde(default = "default_steps")]
    pub sample_steps: usize,
    /// Multiplier on latent offsets from the identity latent.
    pub latent_scale: f64,
    /// Std of the noise added to teacher-forced decoder inputs.
    pub audio_input_noise: f64,
    /// Weight of the stop-token cross-entropy in the objective.
    pub stop_weight: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: ScaleConfig::desk(),
            entanglement: EntanglementConfig::default(),
            denoiser: DenoiserConfig::default(),
            audio_layers: 2,
            audio_heads: 4,
            bpe_merges: 8,
            sample_steps: default_steps(),
            latent_scale: 1.0,
            audio_input_noise: 0.1,
            stop_weight: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.entanglement.validate(self.scale.channels)?;
        if self.audio_heads == 0 || !self.scale.channels.is_multiple_of(self.audio_heads) {
            return Err(Error::arg("audio heads must divide the channel count"));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::arg("latent_scale must be positive"));
        }
        Ok(())
    }

    /// Denoiser settings with the cross-attention gates taken from the
    /// entanglement ablation flags.
    pub fn resolved_denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            use_ec: self.entanglement.use_embedding_cross_attention,
            use_dc: self.entanglement.use_diffusion_cross_attention,
            ..self.denoiser.clone()
        }
    }
}

/// Everything the model consumes at inference, precomputed once.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub text_ids: Vec<usize>,
    pub text_truncated: bool,
    /// Normalized log-mel features of the reference clip, `[frames, mel]`.
    pub reference: Tensor,
    /// Appearance posterior mean of the source image, `[h, w, 4]`.
    pub identity: Tensor,
    pub face: Tensor,
    pub lip: Tensor,
}

/// Conditioning plus training targets.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub cond: Conditioning,
    /// Normalized log-mel features of the target speech, `[n, mel]`.
    pub target_mel: Tensor,
    /// Unscaled per-frame latent offsets from the identity, `[4, f, h, w]`.
    pub video_delta: Tensor,
}

#[derive(Clone, Copy)]
pub struct Losses<'t> {
    pub l_video: Var<'t>,
    pub l_audio: Var<'t>,
    pub l_stop: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub max_audio_frames: usize,
    pub steps: usize,
    pub seed: u64,
    /// Zero the speaker slices of the decoder prefix.
    pub drop_speaker: bool,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub stream: SpectrogramTokenStream,
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
    pub latents: VideoLatentGrid,
    pub frames: Vec<Image>,
    pub latent: EntangledLatent,
}

#[derive(Clone, Debug)]
pub struct StfmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: EncoderBundle,
    pub entanglement: Entanglement,
    pub audio: AudioSynthesizer,
    pub video: VideoSynthesizer,
}

impl StfmModel {
    pub fn new(config: ModelConfig, bpe: Bpe) -> Result<Self> {
        config.validate()?;
        let mut rng: Rng = stfm_tensor::rng(config.seed);
        let mut store = ParamStore::new();
        let cfg = &config.scale;
        let encoders = EncoderBundle::new(&mut store, cfg, bpe, &mut rng);
        let entanglement = Entanglement::new(&mut store, cfg, config.entanglement.clone(), &mut rng)?;
        let audio = AudioSynthesizer::new(&mut store, cfg, config.audio_layers, config.audio_heads, &mut rng);
        let mut video = VideoSynthesizer::new(&mut store, cfg, config.resolved_denoiser(), &mut rng)?;
        video.latent_scale = config.latent_scale;
        Ok(Self {
            config,
            store,
            encoders,
            entanglement,
            audio,
            video,
        })
    }

    pub fn scale(&self) -> &ScaleConfig {
        &self.config.scale
    }

    pub fn set_latent_scale(&mut self, s: f64) {
        self.config.latent_scale = s;
        self.video.latent_scale = s;
    }

    /// Freezes (or thaws) the appearance autoencoder and frame decoder.
    pub fn freeze_autoencoder(&mut self, frozen: bool) {
        self.store.set_trainable(VISUAL_AE, !frozen);
        self.store.set_trainable(crate::video_synth::DECODER, !frozen);
    }

    /// Posterior means of images, channels-last `[h, w, 4]` each.
    pub fn appearance_means(&self, images: &[&Image]) -> Result<Vec<Tensor>> {
        let hw = self.scale().latent_hw;
        images
            .iter()
            .map(|img| {
                img.expect_square(self.scale().image_hw)?;
                let tape = Tape::new();
                let x = tape.constant(img.data().reshape(&[1, img.height(), img.width(), 3])?);
                let (mean, _) = self.encoders.visual_app.posterior(&tape, &self.store, x);
                Ok(mean.value().reshape(&[hw, hw, 4])?)
            })
            .collect()
    }

    pub fn condition(
        &self,
        source: &Image,
        reference: &Waveform,
        transcript: &str,
        provider: &dyn LandmarkProvider,
    ) -> Result<Conditioning> {
        let cfg = self.scale();
        source.expect_square(cfg.image_hw)?;
        reference.check_duration(cfg.reference_seconds, cfg.hop_length)?;
        let toks = tokenize(&self.encoders.bpe, transcript, cfg.text_max_len)?;
        let mel = compute_mel(reference, cfg.mel_bins, cfg.hop_length, cfg.n_fft)?;
        let identity = self.appearance_means(&[source])?.remove(0);
        let masks = provider.masks(source)?;
        let (face, lip) = self.encoders.visual_struct.mask_features(&masks)?;
        Ok(Conditioning {
            text_ids: toks.ids,
            text_truncated: toks.truncated,
            reference: mel.features(),
            identity,
            face,
            lip,
        })
    }

    /// Landmarks from the known geometry when present, else from pixels.
    pub fn provider_for(sample: &Sample) -> Box<dyn LandmarkProvider> {
        match sample.geometry {
            Some(g) => Box::new(AnalyticLandmarks { geometry: g }),
            None => Box::new(PixelLandmarks::default()),
        }
    }

    pub fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        let cfg = self.scale();
        sample.validate(cfg)?;
        if sample.gt_frames.len() < cfg.frame_count {
            return Err(Error::arg(format!(
                "sample {} has {} frames, need {}",
                sample.id,
                sample.gt_frames.len(),
                cfg.frame_count
            )));
        }
        let provider = Self::provider_for(sample);
        let cond = self.condition(&sample.source_image, &sample.reference_audio, &sample.transcript, provider.as_ref())?;
        let mel = compute_mel(&sample.gt_audio, cfg.mel_bins, cfg.hop_length, cfg.n_fft)?;
        let mut target_mel = mel.features();
        if target_mel.rows() > cfg.max_audio_frames {
            log::warn!(
                "sample {}: {} spectrogram frames cut to {}",
                sample.id,
                target_mel.rows(),
                cfg.max_audio_frames
            );
            target_mel = target_mel.slice_rows(0, cfg.max_audio_frames)?;
        }
        let frames: Vec<&Image> = sample.gt_frames.iter().take(cfg.frame_count).collect();
        let means = self.appearance_means(&frames)?;
        let hw = cfg.latent_hw;
        let mut flat = Vec::with_capacity(means.len() * hw * hw * 4);
        for m in &means {
            flat.extend(m.data().iter().zip(cond.identity.data()).map(|(a, b)| a - b));
        }
        let per_frame = Tensor::new(&[cfg.frame_count, hw, hw, 4], flat)?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            cond,
            target_mel,
            video_delta: frames_last_to_grid(&per_frame)?,
        })
    }

    pub fn encode<'t>(&self, tape: &'t Tape, cond: &Conditioning) -> Result<EncodedVars<'t>> {
        let s = &self.store;
        let e = &self.encoders;
        let reference = tape.constant(cond.reference.clone());
        let (f_fm, f_lm) = e
            .visual_struct
            .forward(tape, s, tape.constant(cond.face.clone()), tape.constant(cond.lip.clone()));
        Ok(EncodedVars {
            f_as: e.audio_seq.forward(tape, s, reference)?,
            f_ap: e.audio_profile.forward(tape, s, reference),
            f_t: e.text.forward(tape, s, &cond.text_ids),
            f_i: e.visual_app.tokens(tape, s, tape.constant(cond.identity.clone())),
            f_fm,
            f_lm,
        })
    }

    pub fn entangle<'t>(&self, tape: &'t Tape, cond: &Conditioning) -> Result<EntangledVars<'t>> {
        let enc = self.encode(tape, cond)?;
        self.entanglement.forward(tape, &self.store, enc)
    }

    /// Training losses for one sample. `l_video` is the noise-prediction MSE,
    /// `l_audio` the per-frame summed squared spectrogram error.
    pub fn losses<'t>(&self, tape: &'t Tape, sample: &PreparedSample, rng: &mut Rng) -> Result<Losses<'t>> {
        use rand::Rng as _;
        let ent = self.entangle(tape, &sample.cond)?;
        let prefix = self
            .audio
            .build_prefix(tape, &self.store, ent.f_as, &ent.audio_layout, ent.f_t)?;
        let target = &sample.target_mel;
        let noise = (self.config.audio_input_noise > 0.0)
            .then(|| randn(target.shape(), rng).map(|v| v * self.config.audio_input_noise));
        let tf = self
            .audio
            .teacher_forced(tape, &self.store, prefix, target, noise.as_ref())?;
        let l_audio = crate::training::audio_loss_var(tf.frames, tape.constant(target.clone()))?;
        let l_stop = stop_loss(tf.stop_logits);

        let sched = &self.video.schedule;
        let t = rng.random_range(1..=sched.steps());
        let x0 = sample.video_delta.map(|v| v * self.config.latent_scale);
        let eps = randn(x0.shape(), rng);
        let x_t = forward_diffuse(&x0, t, &eps, sched)?;
        let ctx = self.video.denoiser.config.use_dc.then_some(tf.hidden);
        let eps_hat = self
            .video
            .denoiser
            .forward(tape, &self.store, &x_t, t, &sample.cond.identity, ent.f_av, ctx)?;
        let l_video = eps_hat.sub(tape.constant(patchify(&eps)?)).square().mean();
        Ok(Losses { l_video, l_audio, l_stop })
    }

    pub fn generate(&self, cond: &Conditioning, opts: &GenerateOptions) -> Result<Generated> {
        let cfg = self.scale();
        let tape = Tape::new();
        let ent = self.entangle(&tape, cond)?;
        let latent = EntangledLatent::from_vars(&ent)?;
        let speaker = if opts.drop_speaker {
            tape.constant(Tensor::zeros(&ent.f_as.shape()))
        } else {
            ent.f_as
        };
        let prefix = self
            .audio
            .build_prefix(&tape, &self.store, speaker, &ent.audio_layout, ent.f_t)?;
        let prefix = (*prefix.value()).clone();
        let stream = self.audio.generate(&self.store, &prefix, opts.max_audio_frames)?;
        let ctx = if self.video.denoiser.config.use_dc {
            Some(self.audio.context(&self.store, &prefix, &stream.frames)?)
        } else {
            None
        };
        let f_av = (*ent.f_av.value()).clone();
        let latents = self.video.sample_video_latents(
            &self.store,
            &cond.identity,
            &f_av,
            ctx.as_ref(),
            cfg.frame_count,
            opts.steps,
            opts.seed,
        )?;
        let frames = self.video.decode_frames(&self.store, &latents, &cond.identity)?;
        let mel = stream.to_mel(cfg)?;
        let waveform = GriffinLim::new(cfg.n_fft).decode(&mel)?;
        Ok(Generated {
            stream,
            mel,
            waveform,
            latents,
            frames,
            latent,
        })
    }

    pub fn default_generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            max_audio_frames: self.scale().max_audio_frames,
            steps: self.config.sample_steps,
            seed: self.config.seed,
            drop_speaker: false,
        }
    }
}
