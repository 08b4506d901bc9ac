use serde::{Deserialize, Serialize};
use stfm_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    AudioSeq,
    AudioProfile,
    Text,
    VisualApp,
    VisualStruct,
    Fused,
}

/// A `length x channels` feature matrix with a real-token mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    data: Tensor,
    modality: Modality,
    pad_mask: Vec<bool>,
    /// Set when the producer had to drop input (text longer than `T_max`).
    pub truncated: bool,
}

impl TokenSequence {
    /// All rows real.
    pub fn new(data: Tensor, modality: Modality) -> Result<Self> {
        let len = data.shape().first().copied().unwrap_or(0);
        Self::with_mask(data, modality, vec![true; len])
    }

    pub fn with_mask(data: Tensor, modality: Modality, pad_mask: Vec<bool>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape(format!(
                "token sequence must be rank 2, got {:?}",
                data.shape()
            )));
        }
        if pad_mask.len() != data.shape()[0] {
            return Err(Error::shape(format!(
                "pad mask length {} != sequence length {}",
                pad_mask.len(),
                data.shape()[0]
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite(format!("{modality:?} token sequence")));
        }
        for (r, &real) in pad_mask.iter().enumerate() {
            if !real && data.row(r).iter().any(|&v| v != 0.0) {
                return Err(Error::shape(format!("padded row {r} is not zero")));
            }
        }
        Ok(Self {
            data,
            modality,
            pad_mask,
            truncated: false,
        })
    }

    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Rows whose mask is true, in order.
    pub fn masked_select(&self) -> Tensor {
        let d = self.channels();
        let mut out = Vec::with_capacity(self.real_len() * d);
        for (r, &real) in self.pad_mask.iter().enumerate() {
            if real {
                out.extend_from_slice(self.data.row(r));
            }
        }
        Tensor::new(&[out.len() / d.max(1), d], out).expect("consistent row width")
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<TokenSequence> {
        if start + len > self.len() {
            return Err(Error::shape(format!(
                "slice {start}..{} out of {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            data: self.data.slice_rows(start, len)?,
            modality: self.modality,
            pad_mask: self.pad_mask[start..start + len].to_vec(),
            truncated: false,
        })
    }
}

/// The `L(a ⊕ b ⊕ ...)` operator: row-wise concatenation.
pub fn concat_tokens(parts: &[&TokenSequence]) -> Result<TokenSequence> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_tokens needs at least one part"))?;
    let d = first.channels();
    let mut data = Vec::new();
    let mut mask = Vec::new();
    for p in parts {
        if p.channels() != d {
            return Err(Error::shape(format!(
                "channel width mismatch: {d} vs {}",
                p.channels()
            )));
        }
        data.extend_from_slice(p.data.data());
        mask.extend_from_slice(&p.pad_mask);
    }
    let modality = if parts.len() == 1 {
        first.modality
    } else {
        Modality::Fused
    };
    let mut out = TokenSequence::with_mask(Tensor::new(&[mask.len(), d], data)?, modality, mask)?;
    out.truncated = parts.iter().any(|p| p.truncated);
    Ok(out)
}

/// Zero-pads `seq` to `target_len` rows.
pub fn pad_to(seq: &TokenSequence, target_len: usize) -> Result<TokenSequence> {
    if target_len < seq.len() {
        return Err(Error::TruncationRefused {
            target: target_len,
            current: seq.len(),
        });
    }
    let d = seq.channels();
    let mut data = seq.data.data().to_vec();
    data.resize(target_len * d, 0.0);
    let mut mask = seq.pad_mask.clone();
    mask.resize(target_len, false);
    let mut out = TokenSequence::with_mask(Tensor::new(&[target_len, d], data)?, seq.modality, mask)?;
    out.truncated = seq.truncated;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use stfm_tensor::{randn, rng};

    fn seq(rows: usize, d: usize, seed: u64) -> TokenSequence {
        TokenSequence::new(randn(&[rows, d], &mut rng(seed)), Modality::Text).unwrap()
    }

    #[test]
    fn concat_matches_loop() {
        let a = TokenSequence::new(Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap(), Modality::AudioSeq).unwrap();
        let b = TokenSequence::new(Tensor::from_rows(&[vec![7., 8., 9.], vec![10., 11., 12.]]).unwrap(), Modality::AudioProfile).unwrap();
        let c = concat_tokens(&[&a, &b]).unwrap();
        assert_eq!(c.data().shape(), &[4, 3]);
        assert_eq!(c.modality(), Modality::Fused);
        for r in 0..4 {
            let src = if r < 2 { a.data().row(r) } else { b.data().row(r - 2) };
            for k in 0..3 {
                assert_eq!(c.data().at2(r, k), src[k]);
            }
        }
    }

    #[test]
    fn concat_single_part_is_identity() {
        let a = seq(3, 4, 1);
        assert_eq!(concat_tokens(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_errors() {
        assert!(matches!(concat_tokens(&[]), Err(Error::Argument(_))));
        let err = concat_tokens(&[&seq(2, 3, 1), &seq(2, 4, 2)]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn pad_examples() {
        let s = seq(3, 2, 5);
        let p = pad_to(&s, 5).unwrap();
        assert_eq!(p.pad_mask(), &[true, true, true, false, false]);
        assert!(p.data().row(3).iter().chain(p.data().row(4)).all(|&v| v == 0.0));
        assert_eq!(pad_to(&s, 3).unwrap(), s);
        assert!(matches!(pad_to(&s, 2), Err(Error::TruncationRefused { target: 2, current: 3 })));
    }

    #[test]
    fn pad_then_slice_round_trip() {
        let s = seq(7, 4, 9);
        let p = pad_to(&s, 9).unwrap();
        assert_eq!(p.slice(0, 7).unwrap().data(), s.data());
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::new(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(TokenSequence::new(t, Modality::Text), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn concat_is_associative(la in 1usize..5, lb in 1usize..5, lc in 1usize..5, seed in 0u64..100) {
            let (a, b, c) = (seq(la, 3, seed), seq(lb, 3, seed + 1), seq(lc, 3, seed + 2));
            let left = concat_tokens(&[&concat_tokens(&[&a, &b]).unwrap(), &c]).unwrap();
            let flat = concat_tokens(&[&a, &b, &c]).unwrap();
            prop_assert_eq!(left.data(), flat.data());
            prop_assert_eq!(left.pad_mask(), flat.pad_mask());
        }

        #[test]
        fn pad_then_masked_select_recovers(len in 1usize..8, extra in 0usize..5, seed in 0u64..100) {
            let s = seq(len, 3, seed);
            let p = pad_to(&s, len + extra).unwrap();
            prop_assert_eq!(&p.masked_select(), s.data());
        }
    }
}
