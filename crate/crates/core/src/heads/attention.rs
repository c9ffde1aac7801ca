//! Pre-norm residual multi-head attention blocks without positional
//! encoding, so a stack of them is permutation equivariant over its rows.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{Bound, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, 1.0, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, 1.0, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, 1.0, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, 1.0, rng),
            heads,
        }
    }

    /// Rows of `x` attend over rows of `context`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, context: Var) -> Var {
        let q = self.query.forward(g, bound, x);
        let k = self.key.forward(g, bound, context);
        let v = self.value.forward(g, bound, context);
        let dim = g.value(q).dims2().1;
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d);
            let kh = g.slice_cols(k, h * d, d);
            let vh = g.slice_cols(v, h * d, d);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, bound, joined)
    }
}

/// `x + MHA(LN x, LN context)` followed by `x + FFN(LN x)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            hidden: Linear::new(store, &format!("{name}.ffn.hidden"), dim, ffn_dim, true, 2.0, rng),
            out: Linear::new(store, &format!("{name}.ffn.out"), ffn_dim, dim, true, 1.0, rng),
        }
    }

    /// Self-attention when `context` is `None`, otherwise attention over
    /// the rows of `context`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, context: Option<Var>) -> Var {
        let n = self.norm1.forward(g, bound, x);
        let c = match context {
            Some(c) => self.norm1.forward(g, bound, c),
            None => n,
        };
        let a = self.attention.forward(g, bound, n, c);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, bound, x);
        let h = self.hidden.forward(g, bound, n);
        let h = g.relu(h);
        let f = self.out.forward(g, bound, h);
        g.add(x, f)
    }

    /// Zeroes both residual branches' output layers.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
        self.out.zero(store);
    }
}
