use stfm_tensor::{Tensor, Var};

use crate::data_model::Image;
use crate::error::{Error, Result};

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Pixel L1 summed over frames and pixels, and the same per element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoLoss {
    pub sum: f64,
    pub mean: f64,
}

pub fn video_loss(generated: &[Image], ground_truth: &[Image]) -> Result<VideoLoss> {
    if generated.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} generated frames vs {} ground-truth frames",
            generated.len(),
            ground_truth.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (g, t) in generated.iter().zip(ground_truth) {
        same_shape(g.data().shape(), t.data().shape(), "frame shapes")?;
        sum += g
            .data()
            .data()
            .iter()
            .zip(t.data().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        count += g.data().numel();
    }
    Ok(VideoLoss {
        sum,
        mean: if count == 0 { 0.0 } else { sum / count as f64 },
    })
}

/// `(1/T) sum_t ||gt_t - gen_t||^2` over frame-major `[T, bins]` spectrograms.
pub fn audio_loss(generated: &Tensor, ground_truth: &Tensor) -> Result<f64> {
    same_shape(generated.shape(), ground_truth.shape(), "spectrogram shapes")?;
    let frames = generated.rows();
    if frames == 0 {
        return Ok(0.0);
    }
    let sq: f64 = generated
        .data()
        .iter()
        .zip(ground_truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / frames as f64)
}

/// Differentiable [`audio_loss`].
pub fn audio_loss_var<'t>(generated: Var<'t>, ground_truth: Var<'t>) -> Result<Var<'t>> {
    same_shape(&generated.shape(), &ground_truth.shape(), "spectrogram shapes")?;
    let frames = generated.rows().max(1) as f64;
    Ok(generated.sub(ground_truth).square().sum().scale(1.0 / frames))
}

pub fn total_loss(l_video: f64, l_audio: f64, lambda_audio: f64) -> Result<f64> {
    if !(l_video.is_finite() && l_audio.is_finite() && lambda_audio.is_finite()) {
        return Err(Error::NonFinite(format!(
            "total loss inputs ({l_video}, {l_audio}, {lambda_audio})"
        )));
    }
    Ok(l_video + lambda_audio * l_audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let ones = vec![Image::filled(2, [1.0; 3]); 2];
        let zeros = vec![Image::filled(2, [0.0; 3]); 2];
        assert_eq!(video_loss(&ones, &zeros).unwrap().sum, 24.0);
        assert_eq!(video_loss(&ones, &ones).unwrap().sum, 0.0);
        let gt = Tensor::zeros(&[4, 1]);
        let mut gen = gt.clone();
        gen.row_mut(2)[0] = 2.0;
        assert_eq!(audio_loss(&gen, &gt).unwrap(), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 0.1).unwrap(), 1.2);
        assert_eq!(total_loss(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 1.0).unwrap(), 3.0);
        assert!(total_loss(f64::NAN, 2.0, 0.1).is_err());
    }

    #[test]
    fn shape_mismatches_are_errors() {
        assert!(video_loss(&[Image::filled(2, [0.0; 3])], &[]).is_err());
        assert!(audio_loss(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2, 2])).is_err());
    }
}
