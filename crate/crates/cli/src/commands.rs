use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use stfm_core::ablation::{eval_item, run_ablation, AblationGrid};
use stfm_core::data_model::ScaleConfig;
use stfm_core::data_pipeline::io::{read_png, read_wav, resize, write_avi, write_png, write_wav};
use stfm_core::data_pipeline::{
    demux_with_ffmpeg, frame_file_name, generate_synthetic_dataset, preprocess_sample, resample_linear, write_sample,
    DatasetManifest, FrameDirSource, MediaSource, PassThroughTranscriber, MANIFEST_FILE,
};
use stfm_core::encoders::{Bpe, PixelLandmarks};
use stfm_core::evaluation::{evaluate_report, ColorStatsExtractor, EvalItem};
use stfm_core::model::StfmModel;
use stfm_core::training::{
    fit_autoencoder_and_prepare, load_checkpoint, prepare_all, save_checkpoint, CheckpointMeta, Trainer,
};
use toml::Value;

use crate::config::{merge_into, read_table, GenerateConfig, RunConfig};
use crate::{DataError, Overrides, UsageError, OUT_ROOT_ENV};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "mov", "mkv", "avi", "webm", "m4v"];

/// `out`, or `$STFM_OUT_ROOT/<command>` when it is absent.
pub fn out_dir(out: Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(command)),
        _ => bail!(UsageError(format!("--out not given and {OUT_ROOT_ENV} is unset"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Preset recorded in a dataset manifest, if any.
fn manifest_preset(data: &Path) -> Option<String> {
    let text = std::fs::read_to_string(data.join(MANIFEST_FILE)).ok()?;
    let first: serde_json::Value = serde_json::from_str(text.lines().next()?).ok()?;
    first.get("preset")?.as_str().map(str::to_string)
}

fn load_dataset(data: &Path, scale: &ScaleConfig) -> Result<Vec<stfm_core::data_model::Sample>> {
    let manifest = DatasetManifest::load(data, scale)?;
    if manifest.entries.is_empty() {
        bail!(DataError(format!("{}: empty manifest", data.display())));
    }
    Ok(manifest.load_samples()?)
}

fn train_bpe(samples: &[stfm_core::data_model::Sample], merges: usize) -> Bpe {
    let texts: Vec<&str> = samples.iter().map(|s| s.transcript.as_str()).collect();
    Bpe::train(&texts, merges)
}

pub fn synth_data(n: usize, seed: u64, out: &Path, preset: &str) -> Result<()> {
    if n == 0 {
        bail!(UsageError("--n must be at least 1".into()));
    }
    let cfg = ScaleConfig::preset(preset).map_err(|e| UsageError(e.to_string()))?;
    let m = generate_synthetic_dataset(out, n, seed, preset, &cfg)?;
    log::info!("wrote {} samples to {}", m.entries.len(), m.path().display());
    Ok(())
}

/// One raw clip: a directory with `frames/` and `audio.wav`, or a video file
/// demuxed through ffmpeg. Transcripts come from `transcript.txt` or
/// `<stem>.txt`; frame rate from `fps.txt` (default: the preset's).
fn open_clip(path: &Path, work: &Path, cfg: &ScaleConfig) -> Result<(Box<dyn MediaSource>, Option<String>)> {
    let read_text = |p: PathBuf| std::fs::read_to_string(p).ok().map(|t| t.trim().to_string());
    if path.is_dir() {
        let fps = match read_text(path.join("fps.txt")) {
            Some(t) => t.parse::<f64>().map_err(|_| DataError(format!("{}: bad fps.txt", path.display())))?,
            None => cfg.fps as f64,
        };
        let src = FrameDirSource::open(&path.join("frames"), fps, Some(&path.join("audio.wav")))?;
        Ok((Box::new(src), read_text(path.join("transcript.txt"))))
    } else {
        let src = demux_with_ffmpeg(path, work, cfg)?;
        Ok((Box::new(src), read_text(path.with_extension("txt"))))
    }
}

fn is_clip(p: &Path) -> bool {
    if p.is_dir() {
        return p.join("frames").is_dir();
    }
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn preprocess(input: &Path, out: &Path, preset: &str) -> Result<()> {
    let cfg = ScaleConfig::preset(preset).map_err(|e| UsageError(e.to_string()))?;
    let mut clips: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_clip(p))
        .collect();
    clips.sort();
    if clips.is_empty() {
        bail!(DataError(format!("{}: no clips found", input.display())));
    }
    create_dir(out)?;
    let mut entries = Vec::new();
    let mut rejected = 0;
    for clip in &clips {
        let id = clip.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
        let work = out.join(".work").join(&id);
        let result = open_clip(clip, &work, &cfg).and_then(|(src, text)| {
            let tr = PassThroughTranscriber { text };
            Ok(preprocess_sample(&id, src.as_ref(), &tr, &cfg)?)
        });
        match result {
            Ok(sample) => entries.push(write_sample(out, &sample, preset, &cfg)?),
            Err(e) => {
                log::warn!("rejected {}: {e:#}", clip.display());
                rejected += 1;
            }
        }
    }
    let _ = std::fs::remove_dir_all(out.join(".work"));
    if entries.is_empty() {
        bail!(DataError(format!("all {rejected} clips were rejected")));
    }
    let m = DatasetManifest { root: out.to_path_buf(), entries };
    m.save()?;
    log::info!("kept {} clips, rejected {rejected}", m.entries.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Walk the schedule and log learning rates without updating weights.
    #[arg(long)]
    pub dry_run: bool,
}

impl TrainArgs {
    fn all_overrides(&self) -> Vec<(String, Value)> {
        let mut o = self.overrides.set.clone();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("train.lr", self.lr.map(Value::Float));
        put("train.epochs", self.epochs.map(|v| Value::Integer(v as i64)));
        put("train.batch_size", self.batch_size.map(|v| Value::Integer(v as i64)));
        put("train.max_steps", self.max_steps.map(|v| Value::Integer(v as i64)));
        put("train.seed", self.seed.map(|v| Value::Integer(v as i64)));
        put("train.dry_run", self.dry_run.then_some(Value::Boolean(true)));
        o
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let out = out_dir(args.out.clone(), "train")?;
    let preset = args.preset.clone().or_else(|| {
        let from_file = args.overrides.config.as_deref().and_then(|p| read_table(p).ok());
        match from_file.as_ref().and_then(|t| t.get("preset")) {
            Some(_) => None,
            None => manifest_preset(&args.data),
        }
    });
    let cfg = RunConfig::resolve(args.overrides.config.as_deref(), preset.as_deref(), &args.all_overrides())?;
    create_dir(&out)?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;

    let samples = load_dataset(&args.data, &cfg.model.scale)?;
    let mut model = StfmModel::new(cfg.model.clone(), train_bpe(&samples, cfg.model.bpe_merges))?;
    let prepared = if cfg.train.dry_run {
        prepare_all(&model, &samples)?
    } else {
        fit_autoencoder_and_prepare(&mut model, &samples, &cfg.train.autoencoder, cfg.train.seed)?
    };
    let mut trainer = Trainer::new(cfg.train.clone())?
        .with_log(&out.join(TRAIN_LOG))?
        .with_checkpoints(&out);
    let report = trainer.run(&mut model, &prepared)?;
    if !cfg.train.dry_run {
        let meta = CheckpointMeta {
            step: trainer.step,
            epoch: report.checkpoints.len(),
        };
        save_checkpoint(&out.join(FINAL_CHECKPOINT), &model, &meta)?;
    }
    log::info!("trained {} steps into {}", trainer.step, out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source face (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Reference voice (WAV); its first seconds are used.
    #[arg(long)]
    pub ref_audio: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clip identifier recorded for evaluation; defaults to the output directory name.
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Metadata written next to generated media.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub text: String,
    pub fps: usize,
    pub checkpoint: PathBuf,
    pub generate: GenerateConfig,
}

pub const CLIP_META: &str = "clip.json";

pub fn generate(args: GenerateArgs) -> Result<()> {
    let out = out_dir(args.out.clone(), "generate")?;
    let mut set = args.overrides.set.clone();
    if let Some(s) = args.seed {
        set.push(("seed".into(), Value::Integer(s as i64)));
    }
    if let Some(s) = args.steps {
        set.push(("steps".into(), Value::Integer(s as i64)));
    }
    let file = match args.overrides.config.as_deref() {
        Some(p) => read_table(p)?
            .remove("generate")
            .and_then(|v| v.as_table().cloned())
            .unwrap_or_default(),
        None => Default::default(),
    };
    let gcfg: GenerateConfig = merge_into(&GenerateConfig::default(), file, &set)?;

    let (model, _) = load_checkpoint(&args.ckpt)?;
    let scale = model.scale().clone();
    let image = resize(&read_png(&args.image)?, scale.image_hw)?;
    let voice = resample_linear(&read_wav(&args.ref_audio)?, scale.sample_rate);
    let need = scale.reference_samples();
    if voice.len() < need {
        bail!(DataError(format!(
            "reference audio is {:.2} s, need {:.2} s",
            voice.duration_s(),
            scale.reference_seconds
        )));
    }
    let reference = voice.head(need);
    let cond = model.condition(&image, &reference, &args.text, &PixelLandmarks::default())?;
    let mut opts = model.default_generate_options();
    opts.seed = gcfg.seed;
    if let Some(s) = gcfg.steps {
        opts.steps = s;
    }
    if let Some(m) = gcfg.max_audio_frames {
        opts.max_audio_frames = m;
    }
    let g = model.generate(&cond, &opts)?;

    create_dir(&out)?;
    write_wav(&out.join("audio.wav"), &g.waveform)?;
    for (k, f) in g.frames.iter().enumerate() {
        write_png(&out.join("frames").join(frame_file_name(k)), f)?;
    }
    write_avi(&out.join("clip.avi"), &g.frames, scale.fps, &g.waveform)?;
    let id = args.id.clone().unwrap_or_else(|| {
        out.file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("clip")
            .to_string()
    });
    let meta = ClipMeta {
        id,
        text: args.text.clone(),
        fps: scale.fps,
        checkpoint: args.ckpt.clone(),
        generate: gcfg,
    };
    std::fs::write(out.join(CLIP_META), serde_json::to_string_pretty(&meta)?)?;
    log::info!(
        "generated {} frames and {:.2} s of audio in {}",
        g.frames.len(),
        g.waveform.duration_s(),
        out.display()
    );
    Ok(())
}

fn read_clip(dir: &Path) -> Result<EvalItem> {
    let meta: Option<ClipMeta> = std::fs::read_to_string(dir.join(CLIP_META))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let src = FrameDirSource::open(&dir.join("frames"), 0.0, None)?;
    let frames = (0..src.frame_count()).map(|k| src.frame(k)).collect::<stfm_core::Result<Vec<_>>>()?;
    let audio = read_wav(&dir.join("audio.wav"))?;
    let fallback = || dir.file_name().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let transcript = std::fs::read_to_string(dir.join("transcript.txt")).map(|t| t.trim().to_string());
    Ok(EvalItem {
        id: meta.as_ref().map_or_else(fallback, |m| m.id.clone()),
        frames,
        audio,
        transcript: meta.map(|m| m.text).or(transcript.ok()).unwrap_or_default(),
    })
}

/// Clip directories in `root`: `root` itself when it holds `frames/`, else
/// each child that does.
fn read_clips(root: &Path) -> Result<Vec<EvalItem>> {
    if root.join("frames").is_dir() {
        return Ok(vec![read_clip(root)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_clip(d)).collect()
}

pub fn evaluate(gen: &Path, gt: &Path, out: &Path, preset: &str) -> Result<()> {
    let generated = read_clips(gen)?;
    if generated.is_empty() {
        bail!(DataError(format!("{}: no generated clips", gen.display())));
    }
    let (truth, scale) = if gt.join(MANIFEST_FILE).is_file() {
        let name = manifest_preset(gt).unwrap_or_else(|| preset.to_string());
        let scale = ScaleConfig::preset(&name).map_err(|e| DataError(e.to_string()))?;
        let samples = load_dataset(gt, &scale)?;
        (samples.iter().map(eval_item).collect::<Vec<_>>(), scale)
    } else {
        let scale = ScaleConfig::preset(preset).map_err(|e| UsageError(e.to_string()))?;
        (read_clips(gt)?, scale)
    };
    let paired = generated
        .iter()
        .map(|g| {
            truth
                .iter()
                .find(|t| t.id == g.id)
                .cloned()
                .ok_or_else(|| DataError(format!("no ground truth for generated clip `{}`", g.id)))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let extractor = ColorStatsExtractor { frames: 4 };
    let extractor: Option<&dyn stfm_core::evaluation::FeatureExtractor> =
        (generated.len() > 1).then_some(&extractor as _);
    let report = evaluate_report(&generated, &paired, &scale, extractor, None)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&report.to_json())?)
        .with_context(|| format!("writing {}", out.display()))?;
    std::fs::write(out.with_extension("csv"), report.to_csv())?;
    std::fs::write(out.with_extension("txt"), report.to_table())?;
    println!("{}", report.to_table());
    Ok(())
}

pub fn ablate(data: &Path, grid: Option<&Path>, out: &Path, set: &[(String, Value)]) -> Result<()> {
    let mut table = match grid {
        Some(p) => read_table(p)?,
        None => Default::default(),
    };
    let preset = match table.remove("preset") {
        Some(Value::String(s)) => s,
        Some(_) => bail!(UsageError("preset must be a string".into())),
        None => manifest_preset(data).unwrap_or_else(|| "desk".into()),
    };
    let mut base = AblationGrid::default();
    base.model.scale = ScaleConfig::preset(&preset).map_err(|e| UsageError(e.to_string()))?;
    let grid: AblationGrid = merge_into(&base, table, set)?;
    grid.model.validate().map_err(|e| UsageError(e.to_string()))?;
    grid.train.validate().map_err(|e| UsageError(e.to_string()))?;
    create_dir(out)?;
    std::fs::write(out.join("grid.resolved.toml"), toml::to_string_pretty(&grid)?)?;

    let samples = load_dataset(data, &grid.model.scale)?;
    let bpe = train_bpe(&samples, grid.model.bpe_merges);
    let rows = run_ablation(&grid, &samples, &bpe, Some(out))?;
    for r in &rows {
        println!("{}: psnr {:.3} ssim {:.4} mcd {:.3} sync {:.3}", r.name, r.psnr, r.ssim, r.mcd, r.sync_corr);
    }
    Ok(())
}
