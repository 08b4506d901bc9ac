use std::rc::Rc;

use stfm_tensor::nn::{Embedding, LayerNorm, Linear};
use stfm_tensor::{Mask, ParamStore, Rng, Tape, Tensor, Var};

use super::attention::MultiHeadAttention;
use crate::data_model::Constituent;
use crate::error::Result;

/// Position-wise two-layer GELU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut Rng) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), d, d * mult, rng);
        let down = Linear::new(store, &format!("{name}.down"), d * mult, d, rng);
        store.value_mut(down.weight).scale_in_place(0.25);
        Self { up, down }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        self.down.forward(tape, store, self.up.forward(tape, store, x).gelu())
    }
}

/// Pre-norm block: self-attention over the query stream, cross-attention to
/// the key/value stream, feed-forward; each with a residual connection.
#[derive(Clone, Debug)]
pub struct EntanglementBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ln_kv: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EntanglementBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_mult: usize, rng: &mut Rng) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_mult, rng),
        }
    }

    /// Output projections of every residual branch.
    pub fn output_projections(&self) -> [&Linear; 3] {
        [&self.self_attn.o, &self.cross_attn.o, &self.ffn.down]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        q_pos: Var<'t>,
        kv: Var<'t>,
        q_mask: Option<&Mask>,
        kv_mask: Option<&Mask>,
        weights: &mut Vec<Rc<Tensor>>,
    ) -> Result<Var<'t>> {
        let h = self.ln_self.forward(tape, store, x);
        let hq = h.add(q_pos);
        let (sa, w) = self.self_attn.forward(tape, store, hq, hq, h, q_mask, None)?;
        weights.extend(w);
        let x = x.add(sa);

        let h = self.ln_cross.forward(tape, store, x).add(q_pos);
        let kvn = self.ln_kv.forward(tape, store, kv);
        let (ca, w) = self.cross_attn.forward(tape, store, h, kvn, kvn, kv_mask, None)?;
        weights.extend(w);
        let x = x.add(ca);

        let h = self.ln_ffn.forward(tape, store, x);
        Ok(x.add(self.ffn.forward(tape, store, h)))
    }
}

/// One transformer encoder: learned query positions, constituent-type
/// embeddings on keys/values, and a stack of blocks.
#[derive(Clone, Debug)]
pub struct Stream {
    pub positions: Embedding,
    pub types: Embedding,
    pub blocks: Vec<EntanglementBlock>,
}

impl Stream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        max_queries: usize,
        layers: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            positions: Embedding::new(store, &format!("{name}.pos"), max_queries, d, 0.1, rng),
            types: Embedding::new(store, &format!("{name}.types"), Constituent::ALL.len(), d, 0.1, rng),
            blocks: (0..layers)
                .map(|l| EntanglementBlock::new(store, &format!("{name}.block{l}"), d, heads, ffn_mult, rng))
                .collect(),
        }
    }

    /// Runs all blocks; returns the final query stream and every attention
    /// weight matrix in evaluation order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        kv: Var<'t>,
        kv_types: &[usize],
        q_mask: Option<&Mask>,
        kv_mask: Option<&Mask>,
    ) -> Result<(Var<'t>, Vec<Rc<Tensor>>)> {
        let pos = self.positions.prefix(tape, store, queries.rows());
        let kv = kv.add(self.types.forward(tape, store, kv_types));
        let mut x = queries;
        let mut weights = Vec::new();
        for b in &self.blocks {
            x = b.forward(tape, store, x, pos, kv, q_mask, kv_mask, &mut weights)?;
        }
        Ok((x, weights))
    }
}
