//! Byte-level byte-pair encoding.
//!
//! Ids `0..256` are raw bytes, so every string is encodable; merged tokens
//! follow in merge order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bpe {
    merges: Vec<(u32, u32)>,
    #[serde(skip)]
    ranks: HashMap<(u32, u32), u32>,
}

impl Bpe {
    /// Byte fallback only, no merges.
    pub fn bytes_only() -> Self {
        Self::default()
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        Self { merges, ranks }
    }

    /// Learns up to `num_merges` merges; ties break toward the smaller pair.
    pub fn train(corpus: &[&str], num_merges: usize) -> Self {
        let mut words: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| s.bytes().map(u32::from).collect())
            .collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += 1;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let new_id = 256 + merges.len() as u32;
            merges.push(pair);
            for w in &mut words {
                *w = merge_word(w, pair, new_id);
            }
        }
        Self::from_merges(merges)
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(u32::from).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            ids = merge_word(&ids, pair, 256 + rank);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            self.expand(id, &mut bytes);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn expand(&self, id: u32, out: &mut Vec<u8>) {
        if id < 256 {
            out.push(id as u8);
        } else {
            let (a, b) = self.merges[(id - 256) as usize];
            self.expand(a, out);
            self.expand(b, out);
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        *self = Self::from_merges(std::mem::take(&mut self.merges));
    }
}

fn merge_word(w: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_byte_fallback() {
        let bpe = Bpe::train(&["hello hello world", "low lower lowest"], 10);
        for s in ["hello world", "zzz ünïcode", "h"] {
            assert_eq!(bpe.decode(&bpe.encode(s)), s);
        }
        assert!(bpe.encode("hello").len() < 5);
    }

    #[test]
    fn training_is_deterministic() {
        let a = Bpe::train(&["abab cdcd abcd"], 5);
        let b = Bpe::train(&["abab cdcd abcd"], 5);
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn serde_round_trip_reindexes() {
        let bpe = Bpe::train(&["aaaa bbbb aabb"], 4);
        let json = serde_json::to_string(&bpe).unwrap();
        let mut back: Bpe = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.encode("aabb"), bpe.encode("aabb"));
    }
}
