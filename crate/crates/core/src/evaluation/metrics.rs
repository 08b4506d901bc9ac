use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data_model::{Image, Waveform};
use crate::data_pipeline::dsp::{compute_mel, dct2, frame_rms};
use crate::encoders::{LandmarkProvider, PixelLandmarks};
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Mel-cepstral coefficients 1..=13.
pub const MCD_COEFFS: usize = 13;
pub const SYNC_MAX_LAG: isize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn check_pair(a: &[Image], b: &[Image]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} vs {} frames", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.data().shape() != y.data().shape() {
            return Err(Error::shape(format!("{:?} vs {:?}", x.data().shape(), y.data().shape())));
        }
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(std::slice::from_ref(a), std::slice::from_ref(b))?;
    let mse = a
        .data()
        .data()
        .iter()
        .zip(b.data().data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().numel() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one channel.
fn filter(img: &[f64], hw: usize, win: &[f64]) -> (Vec<f64>, usize) {
    let k = win.len();
    let out = hw + 1 - k;
    let mut tmp = vec![0.0; hw * out];
    for y in 0..hw {
        for x in 0..out {
            tmp[y * out + x] = (0..k).map(|i| win[i] * img[y * hw + x + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = (0..k).map(|i| win[i] * tmp[(y + i) * out + x]).sum();
        }
    }
    (res, out)
}

/// Mean SSIM over channels and valid window positions, data range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(std::slice::from_ref(a), std::slice::from_ref(b))?;
    let (h, w) = (a.height(), a.width());
    if h != w {
        return Err(Error::shape("SSIM expects square frames"));
    }
    let win = gaussian_window(SSIM_WINDOW.min(h), SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().data().iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().data().iter().skip(c).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, n) = filter(&x, h, &win);
        let (my, _) = filter(&y, h, &win);
        let (sxx, _) = filter(&xx, h, &win);
        let (syy, _) = filter(&yy, h, &win);
        let (sxy, _) = filter(&xy, h, &win);
        let mut acc = 0.0;
        for i in 0..n * n {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (n * n) as f64;
    }
    Ok(total / 3.0)
}

/// Frame-averaged PSNR and SSIM.
pub fn pixel_metrics(generated: &[Image], ground_truth: &[Image]) -> Result<PixelMetrics> {
    check_pair(generated, ground_truth)?;
    let n = generated.len() as f64;
    let (mut p, mut s) = (0.0, 0.0);
    for (g, t) in generated.iter().zip(ground_truth) {
        p += psnr(g, t)?;
        s += ssim(g, t)?;
    }
    Ok(PixelMetrics { psnr: p / n, ssim: s / n })
}

/// Spectrogram settings shared by the audio metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelParams {
    pub mel_bins: usize,
    pub hop: usize,
    pub n_fft: usize,
}

/// Mel cepstra `c1..c13` per frame.
pub fn mel_cepstra(wave: &Waveform, p: &MelParams) -> Result<Vec<Vec<f64>>> {
    if p.mel_bins <= MCD_COEFFS {
        return Err(Error::arg(format!("MCD needs more than {MCD_COEFFS} mel bins")));
    }
    let log = compute_mel(wave, p.mel_bins, p.hop, p.n_fft)?.log_frames();
    Ok((0..log.rows())
        .map(|t| dct2(log.row(t))[1..=MCD_COEFFS].to_vec())
        .collect())
}

/// Mel cepstral distortion in dB, frames aligned by truncation.
pub fn mcd(generated: &Waveform, ground_truth: &Waveform, p: &MelParams) -> Result<f64> {
    if generated.is_empty() || ground_truth.is_empty() {
        return Err(Error::arg("MCD of empty audio"));
    }
    if generated.sample_rate != ground_truth.sample_rate {
        return Err(Error::arg("MCD across sample rates"));
    }
    let a = mel_cepstra(generated, p)?;
    let b = mel_cepstra(ground_truth, p)?;
    let n = a.len().min(b.len());
    let mean = a
        .iter()
        .zip(&b)
        .take(n)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    Ok(10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2 * mean)
}

/// Per-frame spectrogram MSE over log-mel features, aligned by truncation.
pub fn spectrogram_mse(generated: &Waveform, ground_truth: &Waveform, p: &MelParams) -> Result<f64> {
    let a = compute_mel(generated, p.mel_bins, p.hop, p.n_fft)?.log_frames();
    let b = compute_mel(ground_truth, p.mel_bins, p.hop, p.n_fft)?.log_frames();
    let n = a.rows().min(b.rows());
    let sq: f64 = (0..n)
        .map(|t| a.row(t).iter().zip(b.row(t)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(sq / (n * a.cols()) as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("series lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let tiny = 1e-18 * n;
    if va <= tiny || vb <= tiny {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncScore {
    pub correlation: f64,
    /// Audio offset in frames: positive means the audio trails the video.
    pub best_lag: isize,
}

/// Best Pearson correlation of two per-frame series over lags in
/// `[-max_lag, max_lag]`.
pub fn lagged_correlation(aperture: &[f64], envelope: &[f64], max_lag: isize) -> Result<SyncScore> {
    if aperture.len() != envelope.len() {
        return Err(Error::shape("aperture and envelope lengths differ"));
    }
    let n = aperture.len() as isize;
    let mut best: Option<SyncScore> = None;
    for lag in -max_lag..=max_lag {
        let (a0, e0) = if lag >= 0 { (0, lag) } else { (-lag, 0) };
        let len = n - lag.abs();
        if len < 3 {
            continue;
        }
        let a = &aperture[a0 as usize..(a0 + len) as usize];
        let e = &envelope[e0 as usize..(e0 + len) as usize];
        let Ok(r) = pearson(a, e) else { continue };
        if best.is_none_or(|b| r > b.correlation) {
            best = Some(SyncScore { correlation: r, best_lag: lag });
        }
    }
    best.ok_or_else(|| Error::UndefinedCorrelation("aperture or envelope is constant".into()))
}

/// Lip aperture per frame from the pixel landmark provider.
pub fn aperture_series(frames: &[Image]) -> Result<Vec<f64>> {
    let px = PixelLandmarks::default();
    frames.iter().map(|f| px.lip_aperture(f)).collect()
}

/// Envelope-correlation sync proxy between video frames and audio.
pub fn sync_score(frames: &[Image], audio: &Waveform, fps: usize) -> Result<SyncScore> {
    if frames.is_empty() {
        return Err(Error::arg("no frames"));
    }
    let spf = audio.sample_rate as usize / fps;
    let video_len = frames.len() * spf;
    if audio.len().abs_diff(video_len) > spf {
        return Err(Error::Duration {
            measured_s: audio.duration_s(),
            expected_s: video_len as f64 / audio.sample_rate as f64,
            tolerance_s: 1.0 / fps as f64,
        });
    }
    let envelope = frame_rms(&audio.samples, spf, frames.len());
    lagged_correlation(&aperture_series(frames)?, &envelope, SYNC_MAX_LAG)
}

/// Silence-padded or truncated copy of `audio` covering `frames` video frames.
pub fn fit_to_frames(audio: &Waveform, frames: usize, fps: usize) -> Waveform {
    let n = frames * audio.sample_rate as usize / fps;
    let mut samples = audio.samples.clone();
    samples.resize(n, 0.0);
    Waveform {
        samples,
        sample_rate: audio.sample_rate,
    }
}

/// Word error rate: word-level edit distance over reference length.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::arg("empty reference transcript"));
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hw) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rw != hw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    Ok(prev[h.len()] as f64 / r.len() as f64)
}

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::arg("Frechet distance needs at least two equal-length feature vectors"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians with the given moments.
pub fn frechet_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = sqrt_psd(s1);
    let cross = sqrt_psd(&(&r1 * s2 * &r1));
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    d.max(0.0)
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    if m1.len() != m2.len() {
        return Err(Error::shape("feature dimensions differ"));
    }
    Ok(frechet_from_moments(&m1, &s1, &m2, &s2))
}
