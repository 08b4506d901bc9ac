//! Parameterized building blocks recorded onto a [`Tape`].
//!
//! Images use channels-last layout `[n, h, w, c]` so that a convolution is an
//! im2col gather followed by one matrix product.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.weight(format!("{name}.w"), &[d_in, d_out], rng);
        let bias = Some(store.zeros(format!("{name}.b"), ParamKind::Bias, &[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.weight(format!("{name}.w"), &[d_in, d_out], rng);
        Self { weight, bias: None, d_in, d_out }
    }

    /// Output projection whose weights start at zero (residual branches).
    pub fn zero_init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.zeros(format!("{name}.w"), ParamKind::Weight, &[d_in, d_out]);
        let bias = Some(store.zeros(format!("{name}.b"), ParamKind::Bias, &[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y.add_bias(tape.param(store, b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.g"), ParamKind::Norm, &[dim]),
            bias: store.zeros(format!("{name}.b"), ParamKind::Norm, &[dim]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.layer_norm(tape.param(store, self.gain), tape.param(store, self.bias), Self::EPS)
    }
}

/// Lookup table of `count x dim` rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let table = store.normal(format!("{name}.table"), ParamKind::Embedding, &[count, dim], std, rng);
        Self { table, count, dim }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Var<'t> {
        let table = tape.param(store, self.table);
        let dim = self.dim;
        let idx: Vec<u32> = ids
            .iter()
            .flat_map(|&i| {
                assert!(i < self.count, "embedding id {i} >= {}", self.count);
                (0..dim).map(move |c| (i * dim + c) as u32)
            })
            .collect();
        table.gather(idx.into(), &[ids.len(), dim])
    }

    /// First `n` rows, in order.
    pub fn prefix<'t>(&self, tape: &'t Tape, store: &ParamStore, n: usize) -> Var<'t> {
        assert!(n <= self.count, "embedding prefix {n} > {}", self.count);
        tape.param(store, self.table).slice_rows(0, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

thread_local! {
    static IM2COL: RefCell<HashMap<ConvGeom, Rc<[u32]>>> = RefCell::new(HashMap::new());
    static UPSAMPLE: RefCell<HashMap<(usize, usize, usize, usize, usize), Rc<[u32]>>> = RefCell::new(HashMap::new());
}

/// Flat gather index turning `[n,h,w,c]` into `[n*ho*wo, k*k*c]` patches.
pub fn im2col_index(g: ConvGeom) -> Rc<[u32]> {
    IM2COL.with(|cache| {
        if let Some(idx) = cache.borrow().get(&g) {
            return Rc::clone(idx);
        }
        let (ho, wo) = g.out_hw();
        let mut idx = Vec::with_capacity(g.n * ho * wo * g.k * g.k * g.c);
        for n in 0..g.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let y = (oy * g.stride + ky) as isize - g.pad as isize;
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside = y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w;
                            for c in 0..g.c {
                                idx.push(if inside {
                                    (((n * g.h + y as usize) * g.w + x as usize) * g.c + c) as u32
                                } else {
                                    u32::MAX
                                });
                            }
                        }
                    }
                }
            }
        }
        let idx: Rc<[u32]> = idx.into();
        cache.borrow_mut().insert(g, Rc::clone(&idx));
        idx
    })
}

/// Channels-last 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.weight(format!("{name}.w"), &[k * k * c_in, c_out], rng);
        let bias = store.zeros(format!("{name}.b"), ParamKind::Bias, &[c_out]);
        Self { weight, bias, c_in, c_out, k, stride, pad }
    }

    /// `x`: `[n, h, w, c_in]` -> `[n, ho, wo, c_out]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects [n,h,w,c], got {s:?}");
        assert_eq!(s[3], self.c_in, "conv2d channel mismatch");
        let geom = ConvGeom {
            n: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let (ho, wo) = geom.out_hw();
        let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
            x.reshape(&[s[0] * s[1] * s[2], s[3]])
        } else {
            x.gather(im2col_index(geom), &[s[0] * ho * wo, self.k * self.k * self.c_in])
        };
        cols.matmul(tape.param(store, self.weight))
            .add_bias(tape.param(store, self.bias))
            .reshape(&[s[0], ho, wo, self.c_out])
    }
}

/// Nearest-neighbour upsampling of `[n,h,w,c]` by an integer factor.
pub fn upsample_nearest<'t>(x: Var<'t>, factor: usize) -> Var<'t> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let key = (n, h, w, c, factor);
    let idx = UPSAMPLE.with(|cache| {
        if let Some(idx) = cache.borrow().get(&key) {
            return Rc::clone(idx);
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut idx = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    for ch in 0..c {
                        idx.push((((b * h + y / factor) * w + xx / factor) * c + ch) as u32);
                    }
                }
            }
        }
        let idx: Rc<[u32]> = idx.into();
        cache.borrow_mut().insert(key, Rc::clone(&idx));
        idx
    });
    x.gather(idx, &[n, h * factor, w * factor, c])
}

/// Rearranges `[n, h, w, f*f*c]` into `[n, h*f, w*f, c]`.
pub fn pixel_shuffle<'t>(x: Var<'t>, factor: usize) -> Var<'t> {
    let s = x.shape();
    let (n, h, w, cc) = (s[0], s[1], s[2], s[3]);
    assert_eq!(cc % (factor * factor), 0, "pixel_shuffle channels");
    let c = cc / (factor * factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut idx = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let (sy, dy) = (y / factor, y % factor);
                let (sx, dx) = (xx / factor, xx % factor);
                for ch in 0..c {
                    let src_c = (dy * factor + dx) * c + ch;
                    idx.push((((b * h + sy) * w + sx) * cc + src_c) as u32);
                }
            }
        }
    }
    x.gather(idx.into(), &[n, ho, wo, c])
}

/// Inverse of [`pixel_shuffle`]: `[n, h*f, w*f, c]` into `[n, h, w, f*f*c]`.
pub fn pixel_unshuffle<'t>(x: Var<'t>, factor: usize) -> Var<'t> {
    let s = x.shape();
    let (n, hh, ww, c) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (hh / factor, ww / factor);
    let cc = c * factor * factor;
    let mut idx = Vec::with_capacity(n * h * w * cc);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..factor {
                    for dx in 0..factor {
                        for ch in 0..c {
                            let sy = y * factor + dy;
                            let sx = xx * factor + dx;
                            idx.push((((b * hh + sy) * ww + sx) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    x.gather(idx.into(), &[n, h, w, cc])
}

/// Sinusoidal features of a scalar position, `dim` wide.
pub fn sinusoidal(position: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}
