use std::path::{Path, PathBuf};
use std::process::Command;

use super::io::{read_png, read_wav, resize};
use super::transcribe::Transcriber;
use crate::data_model::{Image, Sample, ScaleConfig, Waveform};
use crate::error::{Error, Result};

/// Random-access video with an optional audio track.
pub trait MediaSource {
    fn fps(&self) -> f64;
    fn frame_count(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Image>;
    fn audio(&self) -> Result<Option<Waveform>>;
}

/// Frames already in memory.
pub struct InMemorySource {
    pub fps: f64,
    pub frames: Vec<Image>,
    pub audio: Option<Waveform>,
}

impl MediaSource for InMemorySource {
    fn fps(&self) -> f64 {
        self.fps
    }
    fn frame_count(&self) -> usize {
        self.frames.len()
    }
    fn frame(&self, index: usize) -> Result<Image> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::arg(format!("frame {index} out of range")))
    }
    fn audio(&self) -> Result<Option<Waveform>> {
        Ok(self.audio.clone())
    }
}

/// Frames rendered on demand, for sources too large to hold in memory.
pub struct GeneratedSource<F: Fn(usize) -> Image> {
    pub fps: f64,
    pub count: usize,
    pub render: F,
    pub audio: Option<Waveform>,
}

impl<F: Fn(usize) -> Image> MediaSource for GeneratedSource<F> {
    fn fps(&self) -> f64 {
        self.fps
    }
    fn frame_count(&self) -> usize {
        self.count
    }
    fn frame(&self, index: usize) -> Result<Image> {
        Ok((self.render)(index))
    }
    fn audio(&self) -> Result<Option<Waveform>> {
        Ok(self.audio.clone())
    }
}

/// A directory of numbered PNG frames (`000000.png`, ...) plus an optional WAV.
pub struct FrameDirSource {
    pub dir: PathBuf,
    pub fps: f64,
    pub audio_path: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl FrameDirSource {
    pub fn open(dir: &Path, fps: f64, audio_path: Option<&Path>) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Media(format!("{}: no PNG frames", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            fps,
            audio_path: audio_path.map(Path::to_path_buf),
            files,
        })
    }
}

impl MediaSource for FrameDirSource {
    fn fps(&self) -> f64 {
        self.fps
    }
    fn frame_count(&self) -> usize {
        self.files.len()
    }
    fn frame(&self, index: usize) -> Result<Image> {
        read_png(&self.files[index])
    }
    fn audio(&self) -> Result<Option<Waveform>> {
        match &self.audio_path {
            Some(p) if p.exists() => read_wav(p).map(Some),
            _ => Ok(None),
        }
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Arguments passed to `ffmpeg` to demux `video` into PNG frames at `fps`
/// and a mono WAV at `sample_rate`.
pub fn ffmpeg_args(video: &Path, frames_dir: &Path, wav: &Path, fps: usize, sample_rate: u32, seconds: f64) -> Vec<Vec<String>> {
    let v = video.display().to_string();
    let t = format!("{seconds}");
    vec![
        vec![
            "-v".into(), "error".into(), "-y".into(), "-i".into(), v.clone(), "-t".into(), t.clone(),
            "-vf".into(), format!("fps={fps}"), "-start_number".into(), "0".into(),
            frames_dir.join("%06d.png").display().to_string(),
        ],
        vec![
            "-v".into(), "error".into(), "-y".into(), "-i".into(), v, "-t".into(), t, "-vn".into(),
            "-ac".into(), "1".into(), "-ar".into(), sample_rate.to_string(), "-c:a".into(), "pcm_s16le".into(),
            wav.display().to_string(),
        ],
    ]
}

/// Demuxes a container file through the external `ffmpeg` binary into
/// `work_dir`, returning a frame-directory source.
pub fn demux_with_ffmpeg(video: &Path, work_dir: &Path, cfg: &ScaleConfig) -> Result<FrameDirSource> {
    if !video.exists() {
        return Err(Error::io(video, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let frames = work_dir.join("frames");
    let wav = work_dir.join("audio.wav");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    let seconds = cfg.clip_seconds().max(cfg.reference_seconds);
    for args in ffmpeg_args(video, &frames, &wav, cfg.fps, cfg.sample_rate, seconds) {
        log::info!("ffmpeg {}", args.join(" "));
        let status = Command::new("ffmpeg")
            .args(&args)
            .status()
            .map_err(|e| Error::Media(format!("cannot run ffmpeg: {e}")))?;
        if !status.success() && !args.iter().any(|a| a == "-vn") {
            return Err(Error::Media(format!("ffmpeg failed on {}", video.display())));
        }
    }
    FrameDirSource::open(&frames, cfg.fps as f64, Some(&wav))
}

/// Linear-interpolation resampling.
pub fn resample_linear(wave: &Waveform, sample_rate: u32) -> Waveform {
    if wave.sample_rate == sample_rate || wave.is_empty() {
        return Waveform {
            samples: wave.samples.clone(),
            sample_rate,
        };
    }
    let ratio = wave.sample_rate as f64 / sample_rate as f64;
    let n = (wave.len() as f64 / ratio).floor() as usize;
    let s = &wave.samples;
    let samples = (0..n)
        .map(|i| {
            let x = i as f64 * ratio;
            let k = x.floor() as usize;
            let frac = x - k as f64;
            let a = s[k.min(s.len() - 1)];
            let b = s[(k + 1).min(s.len() - 1)];
            a + frac * (b - a)
        })
        .collect();
    Waveform { samples, sample_rate }
}

/// Source frame indices kept for a clip of `cfg.frame_count` frames at
/// `cfg.fps`.
pub fn frame_plan(source_fps: f64, source_frames: usize, cfg: &ScaleConfig) -> Result<Vec<usize>> {
    if !(source_fps > 0.0) {
        return Err(Error::arg("source fps must be positive"));
    }
    let needed = cfg.clip_seconds();
    let available = source_frames as f64 / source_fps;
    if available + 1e-9 < needed {
        return Err(Error::Duration {
            measured_s: available,
            expected_s: needed,
            tolerance_s: 0.0,
        });
    }
    Ok((0..cfg.frame_count)
        .map(|k| (((k as f64) * source_fps / cfg.fps as f64) + 1e-9).floor() as usize)
        .map(|i| i.min(source_frames - 1))
        .collect())
}

/// Turns raw media into a [`Sample`]: the first `frame_count` frames at the
/// preset rate and size, the matching audio, a transcript, the first frame
/// as source image and the first `reference_seconds` as reference audio.
pub fn preprocess_sample(id: &str, source: &dyn MediaSource, transcriber: &dyn Transcriber, cfg: &ScaleConfig) -> Result<Sample> {
    let plan = frame_plan(source.fps(), source.frame_count(), cfg)?;
    let audio = source
        .audio()?
        .ok_or_else(|| Error::Media(format!("{id}: no audio track")))?;
    let audio = resample_linear(&audio, cfg.sample_rate);
    let clip_len = cfg.frame_count * cfg.samples_per_frame();
    if audio.len() < clip_len {
        return Err(Error::Duration {
            measured_s: audio.duration_s(),
            expected_s: cfg.clip_seconds(),
            tolerance_s: 0.0,
        });
    }
    let gt_audio = audio.head(clip_len);
    let transcript = transcriber.transcribe(&gt_audio)?.trim().to_string();
    if transcript.is_empty() {
        return Err(Error::arg(format!("{id}: empty transcript, sample rejected")));
    }
    let gt_frames = plan
        .iter()
        .map(|&i| resize(&source.frame(i)?, cfg.image_hw))
        .collect::<Result<Vec<_>>>()?;
    let sample = Sample {
        id: id.to_string(),
        source_image: gt_frames[0].clone(),
        reference_audio: audio.head(cfg.reference_samples()),
        transcript,
        gt_frames,
        gt_audio,
        geometry: None,
    };
    sample.validate(cfg)?;
    Ok(sample)
}
