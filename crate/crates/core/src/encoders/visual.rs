use stfm_tensor::nn::{pixel_unshuffle, Conv2d, Linear};
use stfm_tensor::{randn, ParamStore, Rng, Tape, Tensor, Var};

use super::audio::resample_matrix;
use super::landmarks::{FaceMasks, LandmarkProvider};
use crate::data_model::{Image, Modality, ScaleConfig, TokenSequence};
use crate::error::Result;

/// Width of the hidden feature maps of the appearance autoencoder.
pub const AE_WIDTH: usize = 32;

/// Convolutional variational encoder: image to a `latent_hw` grid of
/// 4-channel Gaussians, plus the `f_i` token projection.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    stem: Linear,
    down: Conv2d,
    mid: Conv2d,
    head: Conv2d,
    token_proj: Linear,
    latent_hw: usize,
    grid: usize,
}

/// Posterior of one image; tensors are channels-last `[h, w, 4]`.
#[derive(Clone, Debug)]
pub struct AppearanceLatent {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

impl AppearanceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScaleConfig, rng: &mut Rng) -> Self {
        Self {
            stem: Linear::new(store, &format!("{name}.ae.stem"), 48, AE_WIDTH, rng),
            down: Conv2d::new(store, &format!("{name}.ae.down"), AE_WIDTH, AE_WIDTH, 3, 2, 1, rng),
            mid: Conv2d::new(store, &format!("{name}.ae.mid"), AE_WIDTH, AE_WIDTH, 3, 1, 1, rng),
            head: Conv2d::new(store, &format!("{name}.ae.head"), AE_WIDTH, 8, 1, 1, 0, rng),
            token_proj: Linear::new(store, &format!("{name}.tokens"), 8, cfg.channels, rng),
            latent_hw: cfg.latent_hw,
            grid: cfg.visual_grid(),
        }
    }

    /// `images`: `[n, H, W, 3]` -> (mean, logvar), each `[n, h, w, 4]`.
    pub fn posterior<'t>(&self, tape: &'t Tape, store: &ParamStore, images: Var<'t>) -> (Var<'t>, Var<'t>) {
        let s = images.shape();
        let n = s[0];
        let packed = pixel_unshuffle(images, 4);
        let ps = packed.shape();
        let h = self
            .stem
            .forward(tape, store, packed.reshape(&[ps[0] * ps[1] * ps[2], 48]))
            .reshape(&[ps[0], ps[1], ps[2], AE_WIDTH])
            .gelu();
        let h = self.down.forward(tape, store, h).gelu();
        let h = self.mid.forward(tape, store, h).gelu();
        let stats = self.head.forward(tape, store, h);
        let hw = self.latent_hw;
        let flat = stats.reshape(&[n * hw * hw, 8]);
        let mean = flat.slice_cols(0, 4).reshape(&[n, hw, hw, 4]);
        let logvar = flat.slice_cols(4, 4).reshape(&[n, hw, hw, 4]);
        (mean, logvar)
    }

    /// `z`: one latent `[h, w, 4]` -> `f_i`, `[V/2, d]`.
    pub fn tokens<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Var<'t> {
        let hw = self.latent_hw;
        let g = self.grid;
        let flat = z.reshape(&[hw * hw, 4]);
        let grid = if g == hw {
            flat
        } else {
            tape.constant(resample_2d(hw, g)).matmul(flat)
        };
        self.token_proj
            .forward(tape, store, grid.reshape(&[g * g / 2, 8]))
    }

    pub fn encode(&self, store: &ParamStore, image: &Image, noise_seed: u64) -> Result<(TokenSequence, AppearanceLatent)> {
        let tape = Tape::new();
        let x = tape.constant(image.data().reshape(&[1, image.height(), image.width(), 3])?);
        let (mean, logvar) = self.posterior(&tape, store, x);
        let eps = randn(&mean.shape(), &mut stfm_tensor::rng(noise_seed));
        let z = reparameterize(&tape, mean, logvar, eps);
        let hw = self.latent_hw;
        let z1 = z.reshape(&[hw, hw, 4]);
        let tokens = self.tokens(&tape, store, z1);
        let latent = AppearanceLatent {
            mean: mean.value().reshape(&[hw, hw, 4])?,
            logvar: logvar.value().reshape(&[hw, hw, 4])?,
            z: z1.value().as_ref().clone(),
        };
        Ok((TokenSequence::new((*tokens.value()).clone(), Modality::VisualApp)?, latent))
    }
}

/// `mean + exp(logvar / 2) * eps`.
pub fn reparameterize<'t>(tape: &'t Tape, mean: Var<'t>, logvar: Var<'t>, eps: Tensor) -> Var<'t> {
    mean.add(logvar.scale(0.5).exp().mul(tape.constant(eps)))
}

/// KL divergence of `N(mean, exp(logvar))` from the unit Gaussian, summed.
pub fn kl_divergence<'t>(mean: Var<'t>, logvar: Var<'t>) -> Var<'t> {
    mean.square()
        .add(logvar.exp())
        .sub(logvar)
        .add_scalar(-1.0)
        .sum()
        .scale(0.5)
}

/// Bilinear resampling of a `from x from` grid to `to x to`, as a matrix on
/// row-major flattened grids.
pub fn resample_2d(from: usize, to: usize) -> Tensor {
    let m = resample_matrix(from, to);
    Tensor::from_fn(&[to * to, from * from], |i| {
        let (r, c) = (i / (from * from), i % (from * from));
        m.at2(r / to, c / from) * m.at2(r % to, c % from)
    })
}

/// Fraction of set pixels in each cell of a `grid x grid` partition.
pub fn pool_mask(mask: &[bool], hw: usize, grid: usize) -> Vec<f64> {
    let mut sums = vec![0.0; grid * grid];
    let mut counts = vec![0.0; grid * grid];
    for y in 0..hw {
        for x in 0..hw {
            let cell = (y * grid / hw) * grid + x * grid / hw;
            counts[cell] += 1.0;
            if mask[y * hw + x] {
                sums[cell] += 1.0;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
}

/// Groups a `grid x grid` map into `(grid/2)^2` tokens of its 2x2 cells.
fn cells_to_tokens(cells: &[f64], grid: usize) -> Tensor {
    let half = grid / 2;
    Tensor::from_fn(&[half * half, 4], |i| {
        let (tok, k) = (i / 4, i % 4);
        let (ty, tx) = (tok / half, tok % half);
        let (dy, dx) = (k / 2, k % 2);
        cells[(2 * ty + dy) * grid + 2 * tx + dx]
    })
}

/// Face and lip masks to `f_fm` and `f_lm`; bias-free so empty masks give
/// zero tokens.
#[derive(Clone, Debug)]
pub struct StructureEncoder {
    face_in: Linear,
    face_out: Linear,
    lip_in: Linear,
    lip_out: Linear,
    image_hw: usize,
    grid: usize,
}

impl StructureEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScaleConfig, rng: &mut Rng) -> Self {
        let d = cfg.channels;
        Self {
            face_in: Linear::no_bias(store, &format!("{name}.face_in"), 4, d, rng),
            face_out: Linear::no_bias(store, &format!("{name}.face_out"), d, d, rng),
            lip_in: Linear::no_bias(store, &format!("{name}.lip_in"), 4, d, rng),
            lip_out: Linear::no_bias(store, &format!("{name}.lip_out"), d, d, rng),
            image_hw: cfg.image_hw,
            grid: cfg.visual_grid(),
        }
    }

    /// Pooled mask features `([V/4, 4], [V/4, 4])` for face and lip.
    pub fn mask_features(&self, masks: &FaceMasks) -> Result<(Tensor, Tensor)> {
        masks.check(self.image_hw)?;
        let face = cells_to_tokens(&pool_mask(&masks.face, masks.hw, self.grid), self.grid);
        let lip = cells_to_tokens(&pool_mask(&masks.lip, masks.hw, self.grid), self.grid);
        Ok((face, lip))
    }

    /// Returns `(f_fm, f_lm)`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, face: Var<'t>, lip: Var<'t>) -> (Var<'t>, Var<'t>) {
        let fm = self.face_in.forward(tape, store, face).gelu();
        let fm = self.face_out.forward(tape, store, fm);
        let lm = self.lip_in.forward(tape, store, lip).gelu();
        let lm = self.lip_out.forward(tape, store, lm);
        (fm, lm)
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        image: &Image,
        provider: &dyn LandmarkProvider,
    ) -> Result<(TokenSequence, TokenSequence)> {
        let masks = provider.masks(image)?;
        let (face, lip) = self.mask_features(&masks)?;
        let tape = Tape::new();
        let (fm, lm) = self.forward(&tape, store, tape.constant(face), tape.constant(lip));
        Ok((
            TokenSequence::new((*fm.value()).clone(), Modality::VisualStruct)?,
            TokenSequence::new((*lm.value()).clone(), Modality::VisualStruct)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::landmarks::EmptyLandmarks;
    use stfm_tensor::rng;

    #[test]
    fn kl_of_unit_gaussian_is_zero() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[2, 2, 4]));
        let lv = tape.constant(Tensor::zeros(&[2, 2, 4]));
        assert_eq!(kl_divergence(m, lv).value().data()[0], 0.0);
    }

    #[test]
    fn reparameterization_is_seeded() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let enc = AppearanceEncoder::new(&mut store, "app", &cfg, &mut rng(3));
        let img = Image::new(Tensor::from_fn(&[64, 64, 3], |i| (i % 7) as f64 / 7.0)).unwrap();
        let (a, la) = enc.encode(&store, &img, 11).unwrap();
        let (b, lb) = enc.encode(&store, &img, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.z, lb.z);
        assert_eq!(a.data().shape(), &[cfg.visual_token_len / 2, cfg.channels]);
        assert_eq!(la.mean.shape(), &[8, 8, 4]);
    }

    #[test]
    fn empty_masks_give_zero_tokens() {
        let cfg = ScaleConfig::desk();
        let mut store = ParamStore::new();
        let enc = StructureEncoder::new(&mut store, "st", &cfg, &mut rng(3));
        let img = Image::filled(64, [0.0, 0.0, 0.0]);
        let (fm, lm) = enc.encode(&store, &img, &EmptyLandmarks).unwrap();
        assert_eq!(fm.len(), cfg.visual_token_len / 4);
        assert!(fm.data().data().iter().chain(lm.data().data()).all(|&v| v == 0.0));
    }

    #[test]
    fn resample_2d_identity_and_constant() {
        let same = resample_2d(4, 4);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(same.at2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let up = resample_2d(3, 7);
        for r in 0..49 {
            assert!((up.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_counts_fractions() {
        let mut mask = vec![false; 16];
        mask[0] = true;
        mask[1] = true;
        let cells = pool_mask(&mask, 4, 2);
        assert_eq!(cells, vec![0.5, 0.0, 0.0, 0.0]);
    }
}
