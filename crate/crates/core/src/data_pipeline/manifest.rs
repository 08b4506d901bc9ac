use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{ensure_parent, read_png, read_wav, write_png, write_wav};
use super::preprocess::frame_file_name;
use super::synthetic::{synthesize_dataset, Identity, SyntheticSample};
use crate::data_model::{FaceGeometry, Sample, ScaleConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of the manifest. Paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub audio: PathBuf,
    pub reference_audio: PathBuf,
    pub frames: PathBuf,
    pub frame_count: usize,
    pub transcript: String,
    pub duration_s: f64,
    pub fps: usize,
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<FaceGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<Identity>,
    /// Mouth half-height per frame, for synthetic clips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mouth_heights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let p = self.path();
        ensure_parent(&p)?;
        let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(&p, err))?;
        }
        Ok(())
    }

    /// Reads `manifest.jsonl` from `root` (or the file itself) and checks
    /// every entry against the preset.
    pub fn load(path: &Path, cfg: &ScaleConfig) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let m = Self { root, entries };
        m.check(cfg)?;
        Ok(m)
    }

    pub fn check(&self, cfg: &ScaleConfig) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.audio, &e.reference_audio, &e.frames] {
                let full = self.root.join(p);
                if !full.exists() {
                    return Err(Error::io(full, std::io::Error::new(std::io::ErrorKind::NotFound, "missing")));
                }
            }
            if e.fps != cfg.fps {
                return Err(Error::arg(format!("{}: fps {} but preset expects {}", e.id, e.fps, cfg.fps)));
            }
            if e.frame_count != cfg.frame_count || (e.duration_s - cfg.clip_seconds()).abs() > cfg.hop_seconds() {
                return Err(Error::Duration {
                    measured_s: e.duration_s,
                    expected_s: cfg.clip_seconds(),
                    tolerance_s: cfg.hop_seconds(),
                });
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let dir = self.root.join(&entry.frames);
        let gt_frames = (0..entry.frame_count)
            .map(|k| read_png(&dir.join(frame_file_name(k))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            id: entry.id.clone(),
            source_image: read_png(&self.root.join(&entry.image))?,
            reference_audio: read_wav(&self.root.join(&entry.reference_audio))?,
            transcript: entry.transcript.clone(),
            gt_frames,
            gt_audio: read_wav(&self.root.join(&entry.audio))?,
            geometry: entry.geometry,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_sample(e)).collect()
    }
}

/// Writes `sample` under `root/<id>/` and returns its manifest line.
pub fn write_sample(root: &Path, sample: &Sample, preset: &str, cfg: &ScaleConfig) -> Result<ManifestEntry> {
    let rel = PathBuf::from(&sample.id);
    let dir = root.join(&rel);
    write_png(&dir.join("source.png"), &sample.source_image)?;
    write_wav(&dir.join("audio.wav"), &sample.gt_audio)?;
    write_wav(&dir.join("reference.wav"), &sample.reference_audio)?;
    for (k, f) in sample.gt_frames.iter().enumerate() {
        write_png(&dir.join("frames").join(frame_file_name(k)), f)?;
    }
    Ok(ManifestEntry {
        id: sample.id.clone(),
        image: rel.join("source.png"),
        audio: rel.join("audio.wav"),
        reference_audio: rel.join("reference.wav"),
        frames: rel.join("frames"),
        frame_count: sample.gt_frames.len(),
        transcript: sample.transcript.clone(),
        duration_s: sample.gt_frames.len() as f64 / cfg.fps as f64,
        fps: cfg.fps,
        preset: preset.to_string(),
        geometry: sample.geometry,
        identity: None,
        mouth_heights: None,
    })
}

fn synthetic_entry(root: &Path, s: &SyntheticSample, preset: &str, cfg: &ScaleConfig) -> Result<ManifestEntry> {
    let mut e = write_sample(root, &s.sample, preset, cfg)?;
    e.identity = Some(s.identity.clone());
    e.mouth_heights = Some(s.mouth_heights.clone());
    Ok(e)
}

/// Renders `n` synthetic samples to disk under `root` with a manifest.
pub fn generate_synthetic_dataset(root: &Path, n: usize, seed: u64, preset: &str, cfg: &ScaleConfig) -> Result<DatasetManifest> {
    let data = synthesize_dataset(n, seed, cfg)?;
    let entries = data
        .iter()
        .map(|s| synthetic_entry(root, s, preset, cfg))
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    m.save()?;
    Ok(m)
}
