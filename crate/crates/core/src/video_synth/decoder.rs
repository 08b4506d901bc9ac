use stfm_tensor::nn::{pixel_shuffle, upsample_nearest, Conv2d, Linear};
use stfm_tensor::{ParamStore, Rng, Tape, Tensor, Var};

use crate::data_model::{Image, VideoLatentGrid};
use crate::encoders::AE_WIDTH;
use crate::error::{Error, Result};

/// Mirror of the appearance encoder: `[n, h, w, 4]` latents to
/// `[n, 8h, 8w, 3]` frames squashed into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FrameDecoder {
    stem: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl FrameDecoder {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng) -> Self {
        Self {
            stem: Linear::new(store, &format!("{name}.stem"), 4, AE_WIDTH, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), AE_WIDTH, AE_WIDTH, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), AE_WIDTH, AE_WIDTH, 3, 1, 1, rng),
            head: Linear::new(store, &format!("{name}.head"), AE_WIDTH, 48, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Var<'t> {
        let s = z.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        let x = self
            .stem
            .forward(tape, store, z.reshape(&[n * h * w, 4]))
            .reshape(&[n, h, w, AE_WIDTH])
            .gelu();
        let x = self.conv1.forward(tape, store, x).gelu();
        let x = upsample_nearest(x, 2);
        let x = self.conv2.forward(tape, store, x).gelu();
        let x = self
            .head
            .forward(tape, store, x.reshape(&[n * 4 * h * w, AE_WIDTH]))
            .reshape(&[n, 2 * h, 2 * w, 48]);
        pixel_shuffle(x, 4).sigmoid()
    }
}

/// `[4, f, h, w]` to channels-last `[f, h, w, 4]`.
pub fn grid_to_frames_last(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 4 || s[0] != 4 {
        return Err(Error::shape(format!("latent grid {s:?}")));
    }
    let (f, h, w) = (s[1], s[2], s[3]);
    Ok(Tensor::from_fn(&[f, h, w, 4], |i| {
        let (p, c) = (i / 4, i % 4);
        grid.data()[c * f * h * w + p]
    }))
}

/// Channels-last `[f, h, w, 4]` to `[4, f, h, w]`.
pub fn frames_last_to_grid(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 4 {
        return Err(Error::shape(format!("channels-last latents {s:?}")));
    }
    let vol = s[0] * s[1] * s[2];
    Ok(Tensor::from_fn(&[4, s[0], s[1], s[2]], |i| {
        let (c, p) = (i / vol, i % vol);
        frames.data()[p * 4 + c]
    }))
}

/// Per-frame latents `identity + delta / scale`, channels-last.
pub fn absolute_latents(delta: &VideoLatentGrid, identity: &Tensor, scale: f64) -> Result<Tensor> {
    let hw = delta.hw();
    if identity.shape() != [hw, hw, 4] {
        return Err(Error::shape(format!("identity {:?} for side {hw}", identity.shape())));
    }
    let per = grid_to_frames_last(delta.data())?;
    let n = identity.numel();
    Ok(Tensor::from_fn(per.shape(), |i| identity.data()[i % n] + per.data()[i] / scale))
}

/// Decodes every frame of `delta` around the identity latent.
pub fn decode_frames(
    decoder: &FrameDecoder,
    store: &ParamStore,
    delta: &VideoLatentGrid,
    identity: &Tensor,
    scale: f64,
) -> Result<Vec<Image>> {
    let z = absolute_latents(delta, identity, scale)?;
    let (f, hw) = (delta.frames(), delta.hw());
    let side = 8 * hw;
    let mut out = Vec::with_capacity(f);
    // One frame per tape keeps peak memory flat for long clips.
    for k in 0..f {
        let tape = Tape::new();
        let zk = z.slice_rows(k * hw * hw, hw * hw)?.reshape(&[1, hw, hw, 4])?;
        let img = decoder.forward(&tape, store, tape.constant(zk)).value();
        out.push(Image::new(img.reshape(&[side, side, 3])?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfm_tensor::{randn, rng};

    #[test]
    fn layout_conversions_invert() {
        let g = randn(&[4, 3, 2, 2], &mut rng(1));
        assert_eq!(frames_last_to_grid(&grid_to_frames_last(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn zero_latents_decode_into_range() {
        let mut store = ParamStore::new();
        let dec = FrameDecoder::new(&mut store, "dec", &mut rng(0));
        for f in [1, 2] {
            let frames = decode_frames(&dec, &store, &VideoLatentGrid::zeros(f, 4), &Tensor::zeros(&[4, 4, 4]), 1.0).unwrap();
            assert_eq!(frames.len(), f);
            assert_eq!(frames[0].height(), 32);
            assert!(frames.iter().all(|im| im.data().data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        }
    }
}
