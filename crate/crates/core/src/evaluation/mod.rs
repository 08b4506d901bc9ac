//! Desk-computable quality metrics and the evaluation report.

mod metrics;

pub use metrics::{
    aperture_series, fit_to_frames, frechet_distance, frechet_from_moments, lagged_correlation, mcd, mel_cepstra,
    pearson, pixel_metrics, psnr, spectrogram_mse, ssim, sync_score, wer, MelParams, PixelMetrics, SyncScore,
    MCD_COEFFS, PSNR_CAP, SYNC_MAX_LAG,
};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{Image, ScaleConfig, Waveform};
use crate::data_pipeline::Transcriber;
use crate::error::{Error, Result};

pub const SYNC_NOTE: &str = "sync_corr/sync_lag: envelope-correlation proxy (pixel lip aperture vs per-frame audio RMS, \
best Pearson r over lags -2..=2 frames), used in place of SyncNet LSE-C/LSE-D";

pub const REPORT_COLUMNS: [&str; 8] = ["id", "psnr", "ssim", "mcd", "spec_mse", "sync_corr", "sync_lag", "wer"];

/// One clip: frames, audio and the text it should say.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub frames: Vec<Image>,
    pub audio: Waveform,
    pub transcript: String,
}

/// Media to fixed-length feature vector, for Frechet-style distances.
pub trait FeatureExtractor {
    fn features(&self, item: &EvalItem) -> Result<Vec<f64>>;
}

/// Per-channel mean and standard deviation of every frame, concatenated over
/// a fixed number of evenly spaced frames.
#[derive(Clone, Copy, Debug)]
pub struct ColorStatsExtractor {
    pub frames: usize,
}

impl FeatureExtractor for ColorStatsExtractor {
    fn features(&self, item: &EvalItem) -> Result<Vec<f64>> {
        if item.frames.is_empty() {
            return Err(Error::arg("no frames"));
        }
        let mut out = Vec::with_capacity(self.frames * 6);
        for k in 0..self.frames {
            let f = &item.frames[k * item.frames.len() / self.frames.max(1)];
            let d = f.data().data();
            let n = (d.len() / 3) as f64;
            for c in 0..3 {
                let mean = d.iter().skip(c).step_by(3).sum::<f64>() / n;
                let var = d.iter().skip(c).step_by(3).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                out.push(mean);
                out.push(var.sqrt());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mcd: f64,
    pub spec_mse: f64,
    /// NaN when either series is constant.
    pub sync_corr: f64,
    pub sync_lag: Option<isize>,
    pub wer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub mcd: f64,
    pub spec_mse: f64,
    pub sync_corr: f64,
    pub wer: Option<f64>,
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

pub fn evaluate_report(
    generated: &[EvalItem],
    ground_truth: &[EvalItem],
    cfg: &ScaleConfig,
    extractor: Option<&dyn FeatureExtractor>,
    transcriber: Option<&dyn Transcriber>,
) -> Result<EvalReport> {
    if generated.len() != ground_truth.len() || generated.is_empty() {
        return Err(Error::arg(format!(
            "unpaired sets: {} generated vs {} ground truth",
            generated.len(),
            ground_truth.len()
        )));
    }
    let params = MelParams {
        mel_bins: cfg.mel_bins,
        hop: cfg.hop_length,
        n_fft: cfg.n_fft,
    };
    let mut samples = Vec::with_capacity(generated.len());
    for (g, t) in generated.iter().zip(ground_truth) {
        if g.id != t.id {
            return Err(Error::arg(format!("unpaired items {} and {}", g.id, t.id)));
        }
        let px = pixel_metrics(&g.frames, &t.frames)?;
        let fitted = fit_to_frames(&g.audio, g.frames.len(), cfg.fps);
        let sync = match sync_score(&g.frames, &fitted, cfg.fps) {
            Ok(s) => Some(s),
            Err(Error::UndefinedCorrelation(msg)) => {
                log::warn!("{}: sync undefined ({msg})", g.id);
                None
            }
            Err(e) => return Err(e),
        };
        let wer = match transcriber {
            Some(tr) => Some(wer(&t.transcript, &tr.transcribe(&g.audio)?)?),
            None => None,
        };
        samples.push(SampleMetrics {
            id: g.id.clone(),
            psnr: px.psnr,
            ssim: px.ssim,
            mcd: mcd(&g.audio, &t.audio, &params)?,
            spec_mse: spectrogram_mse(&g.audio, &t.audio, &params)?,
            sync_corr: sync.map_or(f64::NAN, |s| s.correlation),
            sync_lag: sync.map(|s| s.best_lag),
            wer,
        });
    }
    let frechet = match extractor {
        Some(ex) => {
            let a = generated.iter().map(|i| ex.features(i)).collect::<Result<Vec<_>>>()?;
            let b = ground_truth.iter().map(|i| ex.features(i)).collect::<Result<Vec<_>>>()?;
            Some(frechet_distance(&a, &b)?)
        }
        None => None,
    };
    let aggregate = Aggregate {
        psnr: mean(samples.iter().map(|s| s.psnr)),
        ssim: mean(samples.iter().map(|s| s.ssim)),
        mcd: mean(samples.iter().map(|s| s.mcd)),
        spec_mse: mean(samples.iter().map(|s| s.spec_mse)),
        sync_corr: mean(samples.iter().map(|s| s.sync_corr).filter(|v| v.is_finite())),
        wer: transcriber.map(|_| mean(samples.iter().filter_map(|s| s.wer))),
        frechet,
    };
    Ok(EvalReport {
        note: SYNC_NOTE.to_string(),
        samples,
        aggregate,
    })
}

fn cell(v: f64) -> String {
    if v.is_finite() { format!("{v:.6}") } else { String::new() }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for m in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.id,
                cell(m.psnr),
                cell(m.ssim),
                cell(m.mcd),
                cell(m.spec_mse),
                cell(m.sync_corr),
                m.sync_lag.map(|l| l.to_string()).unwrap_or_default(),
                m.wer.map(cell).unwrap_or_default()
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{},,{}",
            cell(a.psnr),
            cell(a.ssim),
            cell(a.mcd),
            cell(a.spec_mse),
            cell(a.sync_corr),
            a.wer.map(cell).unwrap_or_default()
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{}\n\n", self.note);
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>7} {:>9} {:>9} {:>9} {:>4} {:>6}",
            "id", "psnr", "ssim", "mcd", "spec_mse", "sync_corr", "lag", "wer"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for m in &self.samples {
            let _ = writeln!(
                s,
                "{:<16} {:>9.3} {:>7.4} {:>9.3} {:>9.4} {:>9.3} {:>4} {:>6}",
                m.id,
                m.psnr,
                m.ssim,
                m.mcd,
                m.spec_mse,
                m.sync_corr,
                m.sync_lag.map_or("-".into(), |l| l.to_string()),
                opt(m.wer)
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "{:<16} {:>9.3} {:>7.4} {:>9.3} {:>9.4} {:>9.3} {:>4} {:>6}",
            "mean", a.psnr, a.ssim, a.mcd, a.spec_mse, a.sync_corr, "", opt(a.wer)
        );
        if let Some(f) = a.frechet {
            let _ = writeln!(s, "frechet distance: {f:.6}");
        }
        s
    }

    /// Writes `report.csv`, `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.to_csv())?;
        put("report.txt", self.to_table())?;
        put("report.json", serde_json::to_string_pretty(&self.to_json())?)
    }

    /// JSON form; non-finite numbers become `null`.
    pub fn to_json(&self) -> serde_json::Value {
        let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
        let samples: Vec<_> = self
            .samples
            .iter()
            .map(|m| {
                serde_json::json!({
                    "id": m.id, "psnr": num(m.psnr), "ssim": num(m.ssim), "mcd": num(m.mcd),
                    "spec_mse": num(m.spec_mse), "sync_corr": num(m.sync_corr), "sync_lag": m.sync_lag,
                    "wer": m.wer.map(num),
                })
            })
            .collect();
        let a = &self.aggregate;
        serde_json::json!({
            "note": self.note,
            "columns": REPORT_COLUMNS,
            "samples": samples,
            "aggregate": {
                "psnr": num(a.psnr), "ssim": num(a.ssim), "mcd": num(a.mcd), "spec_mse": num(a.spec_mse),
                "sync_corr": num(a.sync_corr), "wer": a.wer.map(num), "frechet": a.frechet.map(num),
            }
        })
    }
}

/// Structural check of a report written by [`EvalReport::write`].
pub fn validate_report_json(v: &serde_json::Value) -> Result<()> {
    let bad = |m: &str| Err(Error::Format(format!("report: {m}")));
    let Some(obj) = v.as_object() else { return bad("not an object") };
    if !obj.get("note").is_some_and(|n| n.is_string()) {
        return bad("missing note");
    }
    let cols: Vec<&str> = obj
        .get("columns")
        .and_then(|c| c.as_array())
        .map(|c| c.iter().filter_map(|x| x.as_str()).collect())
        .unwrap_or_default();
    if cols != REPORT_COLUMNS {
        return bad("unexpected columns");
    }
    let Some(samples) = obj.get("samples").and_then(|s| s.as_array()) else { return bad("missing samples") };
    if samples.is_empty() {
        return bad("no samples");
    }
    let numeric = |x: &serde_json::Value| x.is_null() || x.is_number();
    for s in samples {
        if !s.get("id").is_some_and(|i| i.is_string()) {
            return bad("sample without id");
        }
        for c in &REPORT_COLUMNS[1..] {
            if !s.get(*c).is_some_and(numeric) {
                return bad(&format!("sample field {c}"));
            }
        }
    }
    let Some(agg) = obj.get("aggregate").and_then(|a| a.as_object()) else { return bad("missing aggregate") };
    for c in ["psnr", "ssim", "mcd", "spec_mse", "sync_corr", "wer", "frechet"] {
        if !agg.get(c).is_some_and(numeric) {
            return bad(&format!("aggregate field {c}"));
        }
    }
    Ok(())
}
