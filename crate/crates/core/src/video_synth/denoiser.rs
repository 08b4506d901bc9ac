use std::rc::Rc;

use serde::{Deserialize, Serialize};
use stfm_tensor::nn::{sinusoidal, Embedding, LayerNorm, Linear};
use stfm_tensor::{concat_cols, Mask, ParamStore, Rng, Tape, Tensor, Var};

use crate::data_model::{ScaleConfig, VideoLatentGrid};
use crate::entanglement::MultiHeadAttention;
use crate::error::{Error, Result};

/// Values per 2x2 latent patch.
pub const PATCH_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub mid_width: usize,
    pub heads: usize,
    pub use_ec: bool,
    pub use_dc: bool,
    /// Width, in video frames, of the temporal-locality prior on DC logits.
    pub dc_sigma_frames: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 32,
            mid_width: 64,
            heads: 4,
            use_ec: true,
            use_dc: true,
            dc_sigma_frames: 0.5,
        }
    }
}

/// `[4, f, h, w]` to `[f*(h/2)*(w/2), 16]`; row `(frame, py, px)`, column
/// `(dy*2 + dx)*4 + c`.
pub fn patchify(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 4 || s[0] != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape(format!("cannot patchify {s:?}")));
    }
    let (f, h, w) = (s[1], s[2], s[3]);
    let (h2, w2) = (h / 2, w / 2);
    let src = grid.data();
    Ok(Tensor::from_fn(&[f * h2 * w2, PATCH_DIM], |i| {
        let (row, col) = (i / PATCH_DIM, i % PATCH_DIM);
        let (fr, py, px) = (row / (h2 * w2), (row / w2) % h2, row % w2);
        let (k, c) = (col / 4, col % 4);
        let (y, x) = (2 * py + k / 2, 2 * px + k % 2);
        src[((c * f + fr) * h + y) * w + x]
    }))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, frames: usize, hw: usize) -> Result<Tensor> {
    let h2 = hw / 2;
    if tokens.shape() != [frames * h2 * h2, PATCH_DIM] {
        return Err(Error::shape(format!(
            "{:?} tokens for {frames} frames of {hw}x{hw}",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    Ok(Tensor::from_fn(&[4, frames, hw, hw], |i| {
        let (c, fr, y, x) = (i / (frames * hw * hw), (i / (hw * hw)) % frames, (i / hw) % hw, i % hw);
        let row = (fr * h2 + y / 2) * h2 + x / 2;
        let col = ((y % 2) * 2 + x % 2) * 4 + c;
        src[row * PATCH_DIM + col]
    }))
}

/// Channels-last identity latent `[h, w, 4]` as patches, repeated per frame.
pub fn identity_patches(identity: &Tensor, frames: usize) -> Result<Tensor> {
    let s = identity.shape();
    if s.len() != 3 || s[2] != 4 || s[0] != s[1] {
        return Err(Error::shape(format!("identity latent {s:?}")));
    }
    let hw = s[0];
    let single = Tensor::from_fn(&[4, 1, hw, hw], |i| {
        let (c, p) = (i / (hw * hw), i % (hw * hw));
        identity.data()[p * 4 + c]
    });
    let p = patchify(&single)?;
    let rows: Vec<Vec<f64>> = (0..frames).flat_map(|_| (0..p.rows()).map(|r| p.row(r).to_vec())).collect();
    Ok(Tensor::from_rows(&rows)?)
}

#[derive(Clone, Debug)]
struct ResMlp {
    ln: LayerNorm,
    up: Linear,
    down: Linear,
}

impl ResMlp {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), c, 2 * c, rng);
        let down = Linear::new(store, &format!("{name}.down"), 2 * c, c, rng);
        store.value_mut(down.weight).scale_in_place(0.25);
        Self { ln: LayerNorm::new(store, &format!("{name}.ln"), c), up, down }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let h = self.up.forward(tape, store, self.ln.forward(tape, store, x)).gelu();
        x.add(self.down.forward(tape, store, h))
    }
}

#[derive(Clone, Debug)]
struct CrossBlock {
    ln: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, d_kv: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), c),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d_kv),
            attn: MultiHeadAttention::with_widths(store, name, c, d_kv, c, heads, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        q_extra: Option<Var<'t>>,
        kv: Var<'t>,
        kv_extra: Option<Var<'t>>,
        bias: Option<&Rc<Tensor>>,
    ) -> Result<Var<'t>> {
        let mut q = self.ln.forward(tape, store, x);
        if let Some(e) = q_extra {
            q = q.add(e);
        }
        let mut k = self.ln_kv.forward(tape, store, kv);
        if let Some(e) = kv_extra {
            k = k.add(e);
        }
        let (a, _) = self.attn.forward(tape, store, q, k, k, None, bias)?;
        Ok(x.add(a))
    }
}

#[derive(Clone, Debug)]
struct SelfBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

/// Encoder-decoder noise predictor over patch tokens, with one skip
/// connection between the two resolution levels.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    in_proj: Linear,
    patch_pos: Embedding,
    step_a: Linear,
    step_b: Linear,
    step_mid: Linear,
    res_in: ResMlp,
    ec1: Option<CrossBlock>,
    dc1: Option<CrossBlock>,
    dc1_frame: Option<Linear>,
    merge: Linear,
    res_mid: ResMlp,
    temporal: SelfBlock,
    ec2: Option<CrossBlock>,
    dc2: Option<CrossBlock>,
    dc2_frame: Option<Linear>,
    split: Linear,
    res_out: ResMlp,
    ln_out: LayerNorm,
    out: Linear,
    latent_hw: usize,
    cond_width: usize,
    /// Audio context rows per video frame.
    audio_per_frame: f64,
}

/// Flat row permutation grouping the four level-one children of each mid
/// token: output row `m*4 + k` is child `k` of mid token `m`.
fn merge_rows(frames: usize, h1: usize) -> Vec<usize> {
    let h2 = h1 / 2;
    let mut out = Vec::with_capacity(frames * h1 * h1);
    for f in 0..frames {
        for qy in 0..h2 {
            for qx in 0..h2 {
                for k in 0..4 {
                    let (y, x) = (2 * qy + k / 2, 2 * qx + k % 2);
                    out.push((f * h1 + y) * h1 + x);
                }
            }
        }
    }
    out
}

fn row_gather(rows: &[usize], width: usize) -> Rc<[u32]> {
    rows.iter()
        .flat_map(|&r| (0..width).map(move |c| (r * width + c) as u32))
        .collect()
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Fixed sinusoidal rows, one per entry of `positions`.
fn sinusoid_rows(positions: impl Iterator<Item = f64>, dim: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = positions.map(|p| sinusoidal(p, dim, 1000.0)).collect();
    Ok(Tensor::from_rows(&rows)?)
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, name: &str, scale: &ScaleConfig, config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let hw = scale.latent_hw;
        if !hw.is_multiple_of(4) {
            return Err(Error::arg(format!("latent side {hw} must be divisible by 4")));
        }
        let (c1, c2, heads) = (config.width, config.mid_width, config.heads);
        if heads == 0 || c1 % heads != 0 || c2 % heads != 0 {
            return Err(Error::arg(format!("widths {c1}/{c2} not divisible by {heads} heads")));
        }
        let d = scale.channels;
        let h1 = hw / 2;
        let n = |s: &str| format!("{name}.{s}");
        let mut cross = |s: &str, c: usize, on: bool, rng: &mut Rng| on.then(|| CrossBlock::new(store, &n(s), c, d, heads, rng));
        let ec1 = cross("ec1", c1, config.use_ec, rng);
        let dc1 = cross("dc1", c1, config.use_dc, rng);
        let ec2 = cross("ec2", c2, config.use_ec, rng);
        let dc2 = cross("dc2", c2, config.use_dc, rng);
        let dc1_frame = config.use_dc.then(|| Linear::new(store, &n("dc1.frame"), d, c1, rng));
        let dc2_frame = config.use_dc.then(|| Linear::new(store, &n("dc2.frame"), d, c2, rng));
        let out = Linear::new(store, &n("out"), c1, PATCH_DIM, rng);
        store.value_mut(out.weight).scale_in_place(0.25);
        Ok(Self {
            in_proj: Linear::new(store, &n("in"), 2 * PATCH_DIM, c1, rng),
            patch_pos: Embedding::new(store, &n("patch_pos"), h1 * h1, c1, 0.1, rng),
            step_a: Linear::new(store, &n("step_a"), c1, c1, rng),
            step_b: Linear::new(store, &n("step_b"), c1, c1, rng),
            step_mid: Linear::new(store, &n("step_mid"), c1, c2, rng),
            res_in: ResMlp::new(store, &n("res_in"), c1, rng),
            ec1,
            dc1,
            dc1_frame,
            merge: Linear::new(store, &n("merge"), 4 * c1, c2, rng),
            res_mid: ResMlp::new(store, &n("res_mid"), c2, rng),
            temporal: SelfBlock {
                ln: LayerNorm::new(store, &n("temporal.ln"), c2),
                attn: MultiHeadAttention::new(store, &n("temporal"), c2, heads, rng),
            },
            ec2,
            dc2,
            dc2_frame,
            split: Linear::new(store, &n("split"), c2, 4 * c1, rng),
            res_out: ResMlp::new(store, &n("res_out"), c1, rng),
            ln_out: LayerNorm::new(store, &n("ln_out"), c1),
            out,
            latent_hw: hw,
            cond_width: d,
            audio_per_frame: 1.0 / (scale.fps as f64 * scale.hop_seconds()),
            config,
        })
    }

    pub fn latent_hw(&self) -> usize {
        self.latent_hw
    }

    /// Gaussian prior `-(dt)^2 / (2 sigma^2)` between each query token's frame
    /// centre and each audio context row, in video frames.
    fn locality_bias(&self, frames: usize, per_frame: usize, ctx_rows: usize) -> Rc<Tensor> {
        let s2 = 2.0 * self.config.dc_sigma_frames.powi(2);
        let a = self.audio_per_frame;
        Rc::new(Tensor::from_fn(&[frames * per_frame, ctx_rows], |i| {
            let (q, k) = (i / ctx_rows, i % ctx_rows);
            let dt = (q / per_frame) as f64 + 0.5 - k as f64 / a;
            -dt * dt / s2
        }))
    }

    /// `[frames, rows]` averaging the context rows that fall inside each
    /// video frame; frames without rows get zeros.
    fn frame_pool(&self, frames: usize, ctx_rows: usize) -> Result<Tensor> {
        let a = self.audio_per_frame;
        let mut m = Tensor::zeros(&[frames, ctx_rows]);
        for f in 0..frames {
            let lo = (f as f64 * a).ceil() as usize;
            let hi = (((f + 1) as f64 * a).ceil() as usize).min(ctx_rows);
            if hi > lo {
                for k in lo..hi {
                    m.data_mut()[f * ctx_rows + k] = 1.0 / (hi - lo) as f64;
                }
            }
        }
        Ok(m)
    }

    /// Predicted noise as patch tokens `[f*(h/2)^2, 16]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        identity: &Tensor,
        f_av: Var<'t>,
        audio_context: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let s = x_t.shape();
        if s.len() != 4 || s[0] != 4 || s[2] != self.latent_hw || s[3] != self.latent_hw {
            return Err(Error::shape(format!("noisy latent {s:?}, side {}", self.latent_hw)));
        }
        if f_av.cols() != self.cond_width {
            return Err(Error::shape(format!("f_av width {} != {}", f_av.cols(), self.cond_width)));
        }
        let ctx = match (self.config.use_dc, audio_context) {
            (true, None) => {
                return Err(Error::Dependency(
                    "diffusion cross-attention is enabled but no audio context was given".into(),
                ))
            }
            (true, Some(c)) => {
                if c.cols() != self.cond_width || c.rows() == 0 {
                    return Err(Error::shape(format!("audio context {:?}", c.shape())));
                }
                Some(c)
            }
            (false, _) => None,
        };
        let frames = s[1];
        let (c1, c2) = (self.config.width, self.config.mid_width);
        let h1 = self.latent_hw / 2;
        let (p1, p2) = (h1 * h1, h1 * h1 / 4);
        let (n1, n2) = (frames * p1, frames * p2);

        let tokens = concat_cols(&[
            tape.constant(patchify(x_t)?),
            tape.constant(identity_patches(identity, frames)?),
        ]);
        let pos_ids: Vec<usize> = (0..n1).map(|i| i % p1).collect();
        let step = tape.constant(Tensor::new(&[1, c1], sinusoidal(t as f64, c1, 10_000.0))?);
        let step = self.step_a.forward(tape, store, step).silu();
        let step1 = self.step_b.forward(tape, store, step);
        let step2 = self.step_mid.forward(tape, store, step);

        let mut x = self
            .in_proj
            .forward(tape, store, tokens)
            .add(self.patch_pos.forward(tape, store, &pos_ids))
            .add(tape.constant(sinusoid_rows((0..n1).map(|i| (i / p1) as f64), c1)?))
            .add_bias(step1);
        x = self.res_in.forward(tape, store, x);

        let ctx_time = |dim: usize| -> Result<Option<Var<'t>>> {
            ctx.map(|c| sinusoid_rows((0..c.rows()).map(|k| k as f64 / self.audio_per_frame), dim).map(|m| tape.constant(m)))
                .transpose()
        };
        let kv_time = ctx_time(self.cond_width)?;
        if let Some(ec) = &self.ec1 {
            x = ec.forward(tape, store, x, None, f_av, None, None)?;
        }
        let pooled = match ctx {
            Some(c) => Some(tape.constant(self.frame_pool(frames, c.rows())?).matmul(c)),
            None => None,
        };
        if let (Some(lin), Some(p)) = (&self.dc1_frame, pooled) {
            let rows: Vec<usize> = (0..n1).map(|i| i / p1).collect();
            x = x.add(lin.forward(tape, store, p).gather(row_gather(&rows, c1), &[n1, c1]));
        }
        if let (Some(dc), Some(c)) = (&self.dc1, ctx) {
            let q_time = tape.constant(sinusoid_rows((0..n1).map(|i| (i / p1) as f64 + 0.5), c1)?);
            let bias = self.locality_bias(frames, p1, c.rows());
            x = dc.forward(tape, store, x, Some(q_time), c, kv_time, Some(&bias))?;
        }
        let skip = x;

        let perm = merge_rows(frames, h1);
        let grouped = x.gather(row_gather(&perm, c1), &[n2, 4 * c1]);
        let mut m = self
            .merge
            .forward(tape, store, grouped)
            .add(tape.constant(sinusoid_rows((0..n2).map(|i| (i / p2) as f64), c2)?))
            .add_bias(step2);
        m = self.res_mid.forward(tape, store, m);
        let same_place: Vec<bool> = (0..n2 * n2).map(|i| (i / n2) % p2 == (i % n2) % p2).collect();
        let h = self.temporal.ln.forward(tape, store, m);
        let (a, _) = self
            .temporal
            .attn
            .forward(tape, store, h, h, h, Some(&Mask::Full(Rc::from(same_place))), None)?;
        m = m.add(a);
        if let Some(ec) = &self.ec2 {
            m = ec.forward(tape, store, m, None, f_av, None, None)?;
        }
        if let (Some(lin), Some(p)) = (&self.dc2_frame, pooled) {
            let rows: Vec<usize> = (0..n2).map(|i| i / p2).collect();
            m = m.add(lin.forward(tape, store, p).gather(row_gather(&rows, c2), &[n2, c2]));
        }
        if let (Some(dc), Some(c)) = (&self.dc2, ctx) {
            let q_time = tape.constant(sinusoid_rows((0..n2).map(|i| (i / p2) as f64 + 0.5), c2)?);
            let bias = self.locality_bias(frames, p2, c.rows());
            m = dc.forward(tape, store, m, Some(q_time), c, kv_time, Some(&bias))?;
        }

        let up = self.split.forward(tape, store, m).reshape(&[n1, c1]);
        let up = up.gather(row_gather(&invert(&perm), c1), &[n1, c1]);
        let y = self.res_out.forward(tape, store, up.add(skip));
        let y = self.ln_out.forward(tape, store, y);
        Ok(self.out.forward(tape, store, y))
    }

    /// Noise estimate in grid layout, no gradients.
    pub fn predict(
        &self,
        store: &ParamStore,
        x_t: &VideoLatentGrid,
        t: usize,
        identity: &Tensor,
        f_av: &Tensor,
        audio_context: Option<&Tensor>,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let fav = tape.constant(f_av.clone());
        let ctx = audio_context.map(|c| tape.constant(c.clone()));
        let eps = self.forward(&tape, store, x_t.data(), t, identity, fav, ctx)?;
        unpatchify(&eps.value(), x_t.frames(), self.latent_hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfm_tensor::{randn, rng};

    #[test]
    fn patchify_round_trips() {
        let g = randn(&[4, 3, 8, 8], &mut rng(1));
        let p = patchify(&g).unwrap();
        assert_eq!(p.shape(), &[3 * 16, 16]);
        assert_eq!(unpatchify(&p, 3, 8).unwrap(), g);
    }

    #[test]
    fn identity_patches_match_a_constant_grid() {
        let id = randn(&[4, 4, 4], &mut rng(2));
        let grid = Tensor::from_fn(&[4, 2, 4, 4], |i| {
            let (c, p) = (i / 32, i % 16);
            id.data()[p * 4 + c]
        });
        assert_eq!(identity_patches(&id, 2).unwrap(), patchify(&grid).unwrap());
    }

    #[test]
    fn merge_permutation_is_a_bijection() {
        let p = merge_rows(3, 4);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..48).collect::<Vec<_>>());
        let inv = invert(&p);
        assert!(p.iter().enumerate().all(|(i, &r)| inv[r] == i));
    }
}
