//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for the parameter leaves. Tapes are cheap and single-use: build one per
//! forward pass and drop it afterwards.
//!
//! Shape errors inside individual ops are programming errors and panic;
//! contract checks belong to the callers that know the domain.

use std::cell::RefCell;
use std::rc::Rc;

use crate::gemm::gemm;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, ParamId)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Attention-style mask for [`Var::softmax_rows`]. `true` keeps an entry.
#[derive(Clone, Debug)]
pub enum Mask {
    /// One flag per column, shared by every row.
    Cols(Rc<[bool]>),
    /// One flag per entry, row-major.
    Full(Rc<[bool]>),
}

impl Mask {
    fn keep(&self, r: usize, c: usize, cols: usize) -> bool {
        match self {
            Mask::Cols(m) => m[c],
            Mask::Full(m) => m[r * cols + c],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    /// A leaf that participates in differentiation without being a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        });
        Var { tape: self, id }
    }

    /// Records a parameter leaf. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        let mut nodes = self.nodes.borrow_mut();
        let nid = nodes.len();
        nodes.push(Node {
            value: Rc::clone(&p.value),
            parents: Vec::new(),
            backward: None,
            needs_grad: p.trainable,
        });
        drop(nodes);
        if p.trainable {
            self.params.borrow_mut().push((nid, id));
        }
        Var { tape: self, id: nid }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of every node reachable from `root`, seeded with `seed`.
    fn run_backward(&self, root: usize, seed: Tensor) -> Vec<Option<Tensor>> {
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = nodes[id].backward.take() {
                let parents = nodes[id].parents.clone();
                let flags: Vec<bool> = parents.iter().map(|&p| nodes[p].needs_grad).collect();
                let pgrads = bw(&g, &flags);
                for ((&p, pg), keep) in parents.iter().zip(pgrads).zip(flags) {
                    if !keep {
                        continue;
                    }
                    if let Some(pg) = pg {
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            } else {
                grads[id] = Some(g);
            }
        }
        grads
    }

    /// Backpropagates from a scalar `loss` and returns parameter gradients.
    ///
    /// Consumes the recorded backward closures; call once per tape.
    pub fn backward(&self, loss: Var<'_>, store: &ParamStore) -> Gradients {
        assert_eq!(loss.value().numel(), 1, "backward needs a scalar loss");
        self.backward_with_seed(loss, Tensor::ones(loss.value().shape()), store)
    }

    pub fn backward_with_seed(&self, out: Var<'_>, seed: Tensor, store: &ParamStore) -> Gradients {
        let grads = self.run_backward(out.id, seed);
        let mut result = Gradients::new(store.len());
        for &(nid, pid) in self.params.borrow().iter() {
            if let Some(g) = &grads[nid] {
                result.accumulate(pid, g);
            }
        }
        result
    }

    /// Like [`Tape::backward`] but returns the gradient for arbitrary leaves.
    pub fn backward_leaves(&self, loss: Var<'_>, leaves: &[Var<'_>]) -> Vec<Option<Tensor>> {
        let seed = Tensor::ones(loss.value().shape());
        let mut grads = self.run_backward(loss.id, seed);
        leaves.iter().map(|l| grads[l.id].take()).collect()
    }
}

fn shape_of_rows(shape: &[usize], cols: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if s.is_empty() {
        s.push(cols);
    } else {
        *s.last_mut().unwrap() = cols;
    }
    s
}

fn col_sums(t: &Tensor, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in t.data().chunks(cols) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let (xc, yc) = (Rc::clone(&x), Rc::new(y.clone()));
        let bw: BackwardFn = Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xc.data().iter().zip(yc.data()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
        name: &str,
    ) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        let y = a.zip_map(&b, f).unwrap();
        let bw: BackwardFn = Box::new(move |g, need| {
            let ga = need[0].then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (&x, &y))| da(*g, x, y))
                    .collect();
                Tensor::new(g.shape(), d).unwrap()
            });
            let gb = need[1].then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (&x, &y))| db(*g, x, y))
                    .collect();
                Tensor::new(g.shape(), d).unwrap()
            });
            vec![ga, gb]
        });
        self.tape.push(y, vec![self.id, other.id], Some(bw))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |g, _, _| g, |g, _, _| g, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |g, _, _| g, |g, _, _| -g, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a, "mul")
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        let cols = x.cols();
        assert_eq!(b.numel(), cols, "add_bias: bias length");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let bshape = b.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, need| {
            let gb = need[1].then(|| Tensor::new(&bshape, col_sums(g, cols)).unwrap());
            vec![need[0].then(|| g.clone()), gb]
        });
        self.tape.push(y, vec![self.id, bias.id], Some(bw))
    }

    /// Multiplies every row element-wise by a length-`cols` vector.
    pub fn mul_bias(&self, gain: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = gain.value();
        let cols = x.cols();
        assert_eq!(w.numel(), cols, "mul_bias: gain length");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, ww) in row.iter_mut().zip(w.data()) {
                *v *= ww;
            }
        }
        let bw: BackwardFn = Box::new(move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(cols) {
                    for (v, ww) in row.iter_mut().zip(w.data()) {
                        *v *= ww;
                    }
                }
                gx
            });
            let gw = need[1].then(|| {
                let mut acc = vec![0.0; cols];
                for (grow, xrow) in g.data().chunks(cols).zip(x.data().chunks(cols)) {
                    for ((a, gg), xx) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gg * xx;
                    }
                }
                Tensor::new(w.shape(), acc).unwrap()
            });
            vec![gx, gw]
        });
        self.tape.push(y, vec![self.id, gain.id], Some(bw))
    }

    /// `self @ other` where `self` is viewed as `rows x k` and `other` is `k x n`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = (a.rows(), a.cols());
        assert_eq!(b.rank(), 2, "matmul: rhs must be rank 2");
        let (k2, n) = (b.rows(), b.cols());
        assert_eq!(k, k2, "matmul: inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, (a.data(), k as isize, 1), (b.data(), n as isize, 1), 0.0, &mut out);
        let y = Tensor::new(&shape_of_rows(a.shape(), n), out).unwrap();
        let bw: BackwardFn = Box::new(move |g, need| {
            let ga = need[0].then(|| {
                // dA = G B^T
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, 1.0, (g.data(), n as isize, 1), (b.data(), 1, n as isize), 0.0, &mut d);
                Tensor::new(a.shape(), d).unwrap()
            });
            let gb = need[1].then(|| {
                // dB = A^T G
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, 1.0, (a.data(), 1, k as isize), (g.data(), n as isize, 1), 0.0, &mut d);
                Tensor::new(b.shape(), d).unwrap()
            });
            vec![ga, gb]
        });
        self.tape.push(y, vec![self.id, other.id], Some(bw))
    }

    /// `self @ other^T` for `m x k` and `n x k` operands.
    pub fn matmul_nt(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let (m, k) = (a.rows(), a.cols());
        let (n, k2) = (b.rows(), b.cols());
        assert_eq!(k, k2, "matmul_nt: inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, (a.data(), k as isize, 1), (b.data(), 1, k as isize), 0.0, &mut out);
        let y = Tensor::new(&[m, n], out).unwrap();
        let bw: BackwardFn = Box::new(move |g, need| {
            let ga = need[0].then(|| {
                // dA = G B
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, 1.0, (g.data(), n as isize, 1), (b.data(), k as isize, 1), 0.0, &mut d);
                Tensor::new(a.shape(), d).unwrap()
            });
            let gb = need[1].then(|| {
                // dB = G^T A
                let mut d = vec![0.0; n * k];
                gemm(n, m, k, 1.0, (g.data(), 1, n as isize), (a.data(), k as isize, 1), 0.0, &mut d);
                Tensor::new(b.shape(), d).unwrap()
            });
            vec![ga, gb]
        });
        self.tape.push(y, vec![self.id, other.id], Some(bw))
    }

    pub fn transpose(&self) -> Var<'t> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let y = x.transpose2();
        let bw: BackwardFn = Box::new(move |g, _| {
            vec![Some(g.transpose2().into_reshape(&xs).unwrap())]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let y = x.reshape(shape).expect("reshape volume");
        let bw: BackwardFn = Box::new(move |g, _| vec![Some(g.reshape(&xs).unwrap())]);
        self.tape.push(y, vec![self.id], Some(bw))
    }

    /// Row-wise softmax. Masked entries get exactly zero weight.
    ///
    /// Panics if a row is fully masked; attention callers check first.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut y = vec![0.0; x.numel()];
        for (r, (xrow, yrow)) in x.data().chunks(cols).zip(y.chunks_mut(cols)).enumerate() {
            let keep = |c: usize| mask.is_none_or(|m| m.keep(r, c, cols));
            let mut mx = f64::NEG_INFINITY;
            for (c, &v) in xrow.iter().enumerate() {
                if keep(c) && v > mx {
                    mx = v;
                }
            }
            assert!(mx > f64::NEG_INFINITY, "softmax row {r} fully masked");
            let mut s = 0.0;
            for (c, (&v, o)) in xrow.iter().zip(yrow.iter_mut()).enumerate() {
                if keep(c) {
                    *o = (v - mx).exp();
                    s += *o;
                }
            }
            yrow.iter_mut().for_each(|o| *o /= s);
        }
        let y = Tensor::new(x.shape(), y).unwrap();
        let yc = y.clone();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut d = vec![0.0; g.numel()];
            for ((grow, yrow), drow) in g
                .data()
                .chunks(cols)
                .zip(yc.data().chunks(cols))
                .zip(d.chunks_mut(cols))
            {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                    *o = yy * (gg - dot);
                }
            }
            vec![Some(Tensor::new(g.shape(), d).unwrap())]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let rows = x.rows();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xrow, hrow)) in x.data().chunks(cols).zip(xhat.chunks_mut(cols)).enumerate() {
            let mean = xrow.iter().sum::<f64>() / cols as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in hrow.iter_mut().zip(xrow) {
                *h = (v - mean) * is;
            }
        }
        let xhat = Tensor::new(x.shape(), xhat).unwrap();
        let normed = self.tape.push(
            xhat.clone(),
            vec![self.id],
            Some(Box::new(move |g, _| {
                let mut d = vec![0.0; g.numel()];
                for (r, ((grow, hrow), drow)) in g
                    .data()
                    .chunks(cols)
                    .zip(xhat.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                    .enumerate()
                {
                    let n = cols as f64;
                    let sg: f64 = grow.iter().sum();
                    let sgh: f64 = grow.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    for ((o, &gg), &hh) in drow.iter_mut().zip(grow).zip(hrow) {
                        *o = inv_std[r] * (gg - sg / n - hh * sgh / n);
                    }
                }
                vec![Some(Tensor::new(g.shape(), d).unwrap())]
            })),
        );
        normed.mul_bias(gain).add_bias(bias)
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        let bw: BackwardFn =
            Box::new(move |g, _| vec![Some(Tensor::full(&xs, g.data()[0]))]);
        self.tape.push(y, vec![self.id], Some(bw))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over rows: `rows x cols -> 1 x cols`.
    pub fn mean_rows(&self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let sums = col_sums(&x, cols);
        let y = Tensor::new(&[1, cols], sums.iter().map(|s| s / rows as f64).collect()).unwrap();
        let xs = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut d = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                d.extend(g.data().iter().map(|v| v / rows as f64));
            }
            vec![Some(Tensor::new(&xs, d).unwrap())]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    /// Contiguous rows `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert!(start + len <= rows, "slice_rows {start}+{len} > {rows}");
        let y = x.slice_rows(start, len).unwrap();
        let xs = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut d = Tensor::zeros(&xs);
            d.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
            vec![Some(d)]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    /// Contiguous columns `[start, start+len)` of a rank-2 view.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert!(start + len <= cols, "slice_cols {start}+{len} > {cols}");
        let mut y = Vec::with_capacity(rows * len);
        for row in x.data().chunks(cols) {
            y.extend_from_slice(&row[start..start + len]);
        }
        let y = Tensor::new(&[rows, len], y).unwrap();
        let xs = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut d = Tensor::zeros(&xs);
            for (drow, grow) in d.data_mut().chunks_mut(cols).zip(g.data().chunks(len)) {
                drow[start..start + len].copy_from_slice(grow);
            }
            vec![Some(d)]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }

    /// Gathers elements by flat index; `u32::MAX` produces a zero.
    pub fn gather(&self, index: Rc<[u32]>, out_shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(index.len(), out_shape.iter().product::<usize>(), "gather: index volume");
        let src = x.data();
        let y: Vec<f64> = index
            .iter()
            .map(|&i| if i == u32::MAX { 0.0 } else { src[i as usize] })
            .collect();
        let y = Tensor::new(out_shape, y).unwrap();
        let xs = x.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _| {
            let mut d = Tensor::zeros(&xs);
            let dd = d.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != u32::MAX {
                    dd[i as usize] += gv;
                }
            }
            vec![Some(d)]
        });
        self.tape.push(y, vec![self.id], Some(bw))
    }
}

/// Stacks rank-2 views along rows. All parts must share `cols`.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let cols = vals[0].cols();
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(vals.len());
    for v in &vals {
        assert_eq!(v.cols(), cols, "concat_rows: width mismatch");
        data.extend_from_slice(v.data());
        lens.push(v.rows());
    }
    let total: usize = lens.iter().sum();
    let y = Tensor::new(&[total, cols], data).unwrap();
    let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
    let bw: BackwardFn = Box::new(move |g, need| {
        let mut off = 0;
        let mut out = Vec::with_capacity(lens.len());
        for (i, &l) in lens.iter().enumerate() {
            let start = off * cols;
            off += l;
            out.push(need[i].then(|| {
                Tensor::new(&shapes[i], g.data()[start..off * cols].to_vec()).unwrap()
            }));
        }
        out
    });
    tape.push(y, parts.iter().map(|p| p.id).collect(), Some(bw))
}

/// Joins rank-2 views side by side. All parts must share `rows`.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = vals[0].rows();
    let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; rows * total];
    let mut off = 0;
    for (v, &w) in vals.iter().zip(&widths) {
        assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
        for r in 0..rows {
            data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
        }
        off += w;
    }
    let y = Tensor::new(&[rows, total], data).unwrap();
    let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
    let bw: BackwardFn = Box::new(move |g, need| {
        let mut off = 0;
        let mut out = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let o = off;
            off += w;
            out.push(need[i].then(|| {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g.data()[r * total + o..r * total + o + w]);
                }
                Tensor::new(&shapes[i], d).unwrap()
            }));
        }
        out
    });
    tape.push(y, parts.iter().map(|p| p.id).collect(), Some(bw))
}
