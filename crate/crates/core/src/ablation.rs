//! The component and encoder ablation grids.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Sample;
use crate::encoders::{Bpe, VISUAL_AE};
use crate::entanglement::EncoderMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_report, EvalItem};
use crate::model::{ModelConfig, StfmModel};
use crate::training::{fit_autoencoder_and_prepare, TrainConfig, Trainer};
use crate::video_synth::DECODER;

fn yes() -> bool {
    true
}

/// One configuration of the grid; unset flags keep the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    #[serde(default)]
    pub group: String,
    pub mode: EncoderMode,
    pub dc: bool,
    pub ec: bool,
    #[serde(default = "yes")]
    pub audio_stream: bool,
    #[serde(default = "yes")]
    pub visual_stream: bool,
    #[serde(default = "yes")]
    pub audio_seq: bool,
    #[serde(default = "yes")]
    pub audio_profile: bool,
    #[serde(default = "yes")]
    pub visual_tokens_in_audio_kv: bool,
}

impl CellSpec {
    fn component(name: &str, mode: EncoderMode, dc: bool, ec: bool) -> Self {
        Self {
            name: name.into(),
            group: "components".into(),
            mode,
            dc,
            ec,
            audio_stream: true,
            visual_stream: true,
            audio_seq: true,
            audio_profile: true,
            visual_tokens_in_audio_kv: true,
        }
    }

    fn encoder(name: &str, edit: impl FnOnce(&mut Self)) -> Self {
        let mut c = Self::component(name, EncoderMode::Ete, true, true);
        c.group = "encoders".into();
        edit(&mut c);
        c
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        let e = &mut m.entanglement;
        e.mode = self.mode;
        e.use_diffusion_cross_attention = self.dc;
        e.use_embedding_cross_attention = self.ec;
        e.audio_stream_enabled = self.audio_stream;
        e.visual_stream_enabled = self.visual_stream;
        e.use_audio_seq = self.audio_seq;
        e.use_audio_profile = self.audio_profile;
        e.visual_tokens_in_audio_kv = self.visual_tokens_in_audio_kv;
        m
    }
}

/// Rows of the transformer / cross-attention table, in its order.
pub fn component_cells() -> Vec<CellSpec> {
    use EncoderMode::*;
    vec![
        CellSpec::component("no-te+dc+ec", None, true, true),
        CellSpec::component("ste", Ste, false, false),
        CellSpec::component("ste+dc", Ste, true, false),
        CellSpec::component("ste+dc+ec", Ste, true, true),
        CellSpec::component("ete+dc+ec", Ete, true, true),
    ]
}

/// Rows of the encoder table, excluding the full model.
pub fn encoder_cells() -> Vec<CellSpec> {
    vec![
        CellSpec::encoder("Only Visual Tokens Attended", |c| c.audio_stream = false),
        CellSpec::encoder("Only Audio Tokens Attended", |c| c.visual_stream = false),
        CellSpec::encoder("No audio sequence encoding", |c| c.audio_seq = false),
        CellSpec::encoder("No audio profile encoding", |c| c.audio_profile = false),
        CellSpec::encoder("No visual token encoding", |c| c.visual_tokens_in_audio_kv = false),
    ]
}

fn default_cells() -> Vec<CellSpec> {
    let mut v = component_cells();
    v.extend(encoder_cells());
    v
}

fn default_eval() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default = "default_cells")]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Trailing samples held out for evaluation.
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            cells: default_cells(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_samples: default_eval(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub group: String,
    pub ete: bool,
    pub ste: bool,
    pub dc: bool,
    pub ec: bool,
    pub trainable_params: usize,
    pub steps: usize,
    pub final_l_total: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mcd: f64,
    pub spec_mse: f64,
    pub sync_corr: f64,
}

impl AblationRow {
    pub fn metrics_finite(&self) -> bool {
        [self.final_l_total, self.psnr, self.ssim, self.mcd, self.spec_mse]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub const ABLATION_COLUMNS: &str =
    "name,group,ete,ste,dc,ec,trainable_params,steps,final_l_total,psnr,ssim,mcd,spec_mse,sync_corr";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_COLUMNS}\n");
    let b = |v: bool| if v { "1" } else { "0" };
    for r in rows {
        let _ = writeln!(
            s,
            "\"{}\",{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.name,
            r.group,
            b(r.ete),
            b(r.ste),
            b(r.dc),
            b(r.ec),
            r.trainable_params,
            r.steps,
            r.final_l_total,
            r.psnr,
            r.ssim,
            r.mcd,
            r.spec_mse,
            r.sync_corr
        );
    }
    s
}

pub fn eval_item(sample: &Sample) -> EvalItem {
    EvalItem {
        id: sample.id.clone(),
        frames: sample.gt_frames.clone(),
        audio: sample.gt_audio.clone(),
        transcript: sample.transcript.clone(),
    }
}

/// Copies the autoencoder and frame decoder weights of `from` into `to`.
pub fn copy_autoencoder(from: &StfmModel, to: &mut StfmModel) -> Result<()> {
    for prefix in [VISUAL_AE, DECODER] {
        for id in from.store.ids_with_prefix(prefix).collect::<Vec<_>>() {
            let p = from.store.get(id);
            let dst = to.store.id(&p.name)?;
            to.store.set(dst, (*p.value).clone())?;
        }
    }
    to.set_latent_scale(from.config.latent_scale);
    Ok(())
}

/// Trains and evaluates every cell on the same data split, autoencoder and
/// seeds. Rows are appended to `out/ablation.csv` as cells finish.
pub fn run_ablation(grid: &AblationGrid, samples: &[Sample], bpe: &Bpe, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    if grid.cells.is_empty() {
        return Err(Error::arg("ablation grid has no cells"));
    }
    if samples.len() <= grid.eval_samples || grid.eval_samples == 0 {
        return Err(Error::arg(format!(
            "need more than {} samples to hold out {} for evaluation",
            samples.len(),
            grid.eval_samples
        )));
    }
    let split = samples.len() - grid.eval_samples;
    let (train, eval) = samples.split_at(split);
    let mut base = StfmModel::new(grid.model.clone(), bpe.clone())?;
    let prepared = fit_autoencoder_and_prepare(&mut base, train, &grid.train.autoencoder, grid.train.seed)?;
    let gt: Vec<EvalItem> = eval.iter().map(eval_item).collect();
    let mut rows = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        log::info!("ablation cell {}", cell.name);
        let mut model = StfmModel::new(cell.apply(&grid.model), bpe.clone())?;
        copy_autoencoder(&base, &mut model)?;
        model.freeze_autoencoder(true);
        let mut trainer = Trainer::new(grid.train.clone())?;
        let report = trainer.run(&mut model, &prepared)?;
        let opts = model.default_generate_options();
        let mut generated = Vec::with_capacity(eval.len());
        for s in eval {
            let provider = StfmModel::provider_for(s);
            let cond = model.condition(&s.source_image, &s.reference_audio, &s.transcript, provider.as_ref())?;
            let g = model.generate(&cond, &opts)?;
            generated.push(EvalItem {
                id: s.id.clone(),
                frames: g.frames,
                audio: g.waveform,
                transcript: s.transcript.clone(),
            });
        }
        let rep = evaluate_report(&generated, &gt, model.scale(), None, None)?;
        let a = &rep.aggregate;
        rows.push(AblationRow {
            name: cell.name.clone(),
            group: cell.group.clone(),
            ete: cell.mode == EncoderMode::Ete,
            ste: cell.mode == EncoderMode::Ste,
            dc: cell.dc,
            ec: cell.ec,
            trainable_params: model.store.trainable_scalars(),
            steps: report.records.len(),
            final_l_total: report.totals().last().copied().unwrap_or(f64::NAN),
            psnr: a.psnr,
            ssim: a.ssim,
            mcd: a.mcd,
            spec_mse: a.spec_mse,
            sync_corr: a.sync_corr,
        });
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("ablation.csv");
            std::fs::write(&p, rows_to_csv(&rows)).map_err(|e| Error::io(&p, e))?;
        }
    }
    if let Some(dir) = out {
        let p = dir.join("ablation.json");
        std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}
