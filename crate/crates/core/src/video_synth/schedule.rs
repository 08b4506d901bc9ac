use stfm_tensor::{randn, Tensor};

use crate::data_model::VideoLatentGrid;
use crate::error::{Error, Result};

/// Linear beta schedule. `alpha_bar(0) == 1`; `alpha_bar(t) == alpha_bars[t-1]`
/// for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::arg(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::arg(format!(
                "betas must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::arg(format!("timestep {t} beyond schedule length {}", self.steps())));
        }
        Ok(())
    }

    /// Descending timesteps visited by a `steps`-step sampler, starting at T.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::arg(format!("sampler steps must be in 1..={total}, got {steps}")));
        }
        Ok((0..steps)
            .rev()
            .map(|i| ((i + 1) * total).div_ceil(steps))
            .collect())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("noise {:?} vs latent {:?}", eps.shape(), x0.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Implicit (eta = 0) update from `t` to `t_prev` given a noise estimate.
pub fn ddim_update(x_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t || t == 0 {
        return Err(Error::arg(format!("implicit step needs t_prev < t, got {t_prev} -> {t}")));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(x_t.zip_map(eps_hat, |x, e| pa * (x - sb * e) / sa + pb * e)?)
}

/// Noise estimator consulted at each sampler step.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &VideoLatentGrid, t: usize) -> Result<Tensor>;
}

pub fn denoise_step(
    model: &dyn EpsPredictor,
    x_t: &VideoLatentGrid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<VideoLatentGrid> {
    let eps = model.predict_eps(x_t, t)?;
    if !eps.is_finite() {
        return Err(Error::NonFinite(format!("noise estimate at step {t}")));
    }
    VideoLatentGrid::new(ddim_update(x_t.data(), &eps, t, t_prev, sched)?)
}

/// Runs the sampler from seeded pure noise of `frames x hw x hw`.
pub fn sample_latents(
    model: &dyn EpsPredictor,
    frames: usize,
    hw: usize,
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<VideoLatentGrid> {
    let ts = sched.sampling_timesteps(steps)?;
    let noise = randn(&[4, frames, hw, hw], &mut stfm_tensor::rng(seed));
    reverse_from(model, VideoLatentGrid::new(noise)?, &ts, sched)
}

/// Reverse pass over the descending timesteps `ts`, finishing at 0.
pub fn reverse_from(
    model: &dyn EpsPredictor,
    x_t: VideoLatentGrid,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<VideoLatentGrid> {
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x = denoise_step(model, &x, t, t_prev, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use stfm_tensor::rng;

    #[test]
    fn two_step_schedule_by_hand() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn long_schedule_is_monotone() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(NoiseSchedule::linear(10, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn zero_step_is_identity_and_zero_noise_is_linear() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x = randn(&[4, 2, 3, 3], &mut rng(1));
        let e = randn(&[4, 2, 3, 3], &mut rng(2));
        assert_eq!(forward_diffuse(&x, 0, &e, &s).unwrap(), x);
        let z = Tensor::zeros(x.shape());
        let a = forward_diffuse(&x.map(|v| 2.5 * v), 40, &z, &s).unwrap();
        let b = forward_diffuse(&x, 40, &z, &s).unwrap().map(|v| 2.5 * v);
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(forward_diffuse(&x, 0, &Tensor::zeros(&[4, 2, 3, 2]), &s).is_err());
    }

    #[test]
    fn heavy_noise_is_standard_normal() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x = Tensor::full(&[10_000], 3.0);
        let e = randn(&[10_000], &mut rng(7));
        let y = forward_diffuse(&x, 1000, &e, &s).unwrap();
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.06, "var {var}");
    }

    struct Oracle<'a> {
        x0: &'a Tensor,
        sched: &'a NoiseSchedule,
        calls: Cell<usize>,
    }

    impl EpsPredictor for Oracle<'_> {
        fn predict_eps(&self, x_t: &VideoLatentGrid, t: usize) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let ab = self.sched.alpha_bar(t);
            Ok(x_t
                .data()
                .zip_map(self.x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())?)
        }
    }

    #[test]
    fn oracle_noise_recovers_the_clean_latent() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = randn(&[4, 3, 4, 4], &mut rng(3));
        let eps = randn(x0.shape(), &mut rng(4));
        let oracle = Oracle { x0: &x0, sched: &s, calls: Cell::new(0) };
        for steps in [1, 10, 100] {
            let xt = VideoLatentGrid::new(forward_diffuse(&x0, 100, &eps, &s).unwrap()).unwrap();
            let ts = s.sampling_timesteps(steps).unwrap();
            let out = reverse_from(&oracle, xt, &ts, &s).unwrap();
            assert!(out.data().max_abs_diff(&x0) < 1e-4);
        }
    }

    #[test]
    fn sampler_counts_and_determinism() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::zeros(&[4, 2, 4, 4]);
        let oracle = Oracle { x0: &x0, sched: &s, calls: Cell::new(0) };
        sample_latents(&oracle, 2, 4, 1, 9, &s).unwrap();
        assert_eq!(oracle.calls.get(), 1);
        let a = sample_latents(&oracle, 2, 4, 7, 9, &s).unwrap();
        let b = sample_latents(&oracle, 2, 4, 7, 9, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(oracle.calls.get(), 15);
        assert!(sample_latents(&oracle, 2, 4, 101, 9, &s).is_err());
    }

    #[test]
    fn timesteps_descend_from_the_top() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![100]);
        let ts = s.sampling_timesteps(10).unwrap();
        assert_eq!(ts.first(), Some(&100));
        assert_eq!(ts.last(), Some(&10));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(100).unwrap().len(), 100);
    }
}
