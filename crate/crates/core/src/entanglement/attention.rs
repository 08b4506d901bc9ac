use std::rc::Rc;

use stfm_tensor::nn::Linear;
use stfm_tensor::{concat_cols, Mask, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};

fn check_mask(mask: Option<&Mask>, nq: usize, nk: usize) -> Result<()> {
    match mask {
        None => Ok(()),
        Some(Mask::Cols(m)) => {
            if m.len() != nk {
                return Err(Error::shape(format!("key mask length {} != {nk} keys", m.len())));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::DegenerateAttention);
            }
            Ok(())
        }
        Some(Mask::Full(m)) => {
            if m.len() != nq * nk {
                return Err(Error::shape(format!("attention mask has {} entries, need {nq}x{nk}", m.len())));
            }
            if m.chunks(nk).any(|row| !row.iter().any(|&k| k)) {
                return Err(Error::DegenerateAttention);
            }
            Ok(())
        }
    }
}

/// Scaled dot-product attention over `heads` column groups, heads
/// concatenated; masked keys get exactly zero weight. Returns the output and
/// the per-head weight matrices.
pub fn attention_core<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    mask: Option<&Mask>,
    bias: Option<&Rc<Tensor>>,
) -> Result<(Var<'t>, Vec<Rc<Tensor>>)> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != nk {
        return Err(Error::shape(format!(
            "attention widths: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{d} channels not divisible into {heads} heads")));
    }
    check_mask(mask, nq, nk)?;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let tape = q.tape();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * dk, dk), k.slice_cols(h * dk, dk), v.slice_cols(h * dk, dk))
        };
        let mut logits = qh.matmul_nt(kh).scale(scale);
        if let Some(b) = bias {
            logits = logits.add(tape.constant((**b).clone()));
        }
        let w = logits.softmax_rows(mask);
        weights.push(w.value());
        outs.push(w.matmul(vh));
    }
    let out = if heads == 1 { outs[0] } else { concat_cols(&outs) };
    Ok((out, weights))
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self::with_widths(store, name, d, d, d, heads, rng)
    }

    /// Queries of width `d_q`, keys/values of width `d_kv`, inner width `d`.
    pub fn with_widths(
        store: &mut ParamStore,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), d_q, d, rng);
        let k = Linear::new(store, &format!("{name}.k"), d_kv, d, rng);
        let v = Linear::new(store, &format!("{name}.v"), d_kv, d, rng);
        let o = Linear::new(store, &format!("{name}.o"), d, d_q, rng);
        store.value_mut(o.weight).scale_in_place(0.25);
        Self { q, k, v, o, heads }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        mask: Option<&Mask>,
        bias: Option<&Rc<Tensor>>,
    ) -> Result<(Var<'t>, Vec<Rc<Tensor>>)> {
        let q = self.q.forward(tape, store, queries);
        let k = self.k.forward(tape, store, keys);
        let v = self.v.forward(tape, store, values);
        let (out, weights) = attention_core(q, k, v, self.heads, mask, bias)?;
        Ok((self.o.forward(tape, store, out), weights))
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head, concatenated, then `W_o`.
pub fn cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: &[bool],
    heads: usize,
    w_o: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let mask = Mask::Cols(Rc::from(key_mask));
    let (out, _) = attention_core(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
        heads,
        Some(&mask),
        None,
    )?;
    Ok(out.value().matmul(w_o)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0, -3.0]]).unwrap();
        let out = cross_attention(&q, &k, &v, &[true], 1, &eye(2)).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[5.0, -3.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.7, 0.2]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let out = cross_attention(&q, &k, &v, &[true, true], 2, &eye(2)).unwrap();
        assert!((out.at2(0, 0) - 1.0).abs() < 1e-12);
        assert!((out.at2(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let t = Tensor::ones(&[2, 4]);
        let err = cross_attention(&t, &t, &t, &[false, false], 2, &eye(4)).unwrap_err();
        assert!(matches!(err, Error::DegenerateAttention));
    }
}
