//! Multi-scale deformable self-attention encoder.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{DeformLayout, Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub sampling: Linear,
    pub attention: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Self {
        let cols = heads * levels * points;
        // heads look alternately forward and backward with growing reach
        let mut bias = Vec::with_capacity(cols);
        for h in 0..heads {
            let dir = if h % 2 == 0 { 1.0 } else { -1.0 };
            let reach = 1.0 + (h / 2) as f64;
            for _ in 0..levels {
                for p in 0..points {
                    bias.push(T::lit(dir * reach * (p + 1) as f64));
                }
            }
        }
        Self {
            sampling: Linear::zeroed(store, &format!("{name}.sampling"), dim, bias),
            attention: Linear::zeroed(
                store,
                &format!("{name}.attention"),
                dim,
                vec![T::zero(); cols],
            ),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            ffn: Mlp {
                hidden: Linear::new(store, rng, &format!("{name}.ffn.hidden"), dim, ffn_dim),
                out: Linear::new(store, rng, &format!("{name}.ffn.out"), ffn_dim, dim),
            },
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
        }
    }

    /// One layer over all positions. `ref_loc` holds every position's own
    /// time converted to each level's index space, repeated per head and point.
    /// Returns the new memory and, when attention ran, its weights.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        pos: Var,
        ref_loc: Var,
        layout: &Arc<DeformLayout>,
        self_attn: bool,
    ) -> (Var, Option<Var>) {
        let mut x = x;
        let mut weights = None;
        if self_attn {
            let q = g.add(x, pos);
            let off = self.sampling.forward(g, q);
            let loc = g.add(off, ref_loc);
            let logits = self.attention.forward(g, q);
            let w = g.softmax_groups(logits, layout.samples_per_head());
            let v = self.value.forward(g, x);
            let sampled = g.deform_sample(v, loc, w, layout.clone());
            let o = self.output.forward(g, sampled);
            let res = g.add(x, o);
            x = self.norm_attn.forward(g, res);
            weights = Some(w);
        }
        let f = self.ffn.forward(g, x);
        let res = g.add(x, f);
        (self.norm_ffn.forward(g, res), weights)
    }
}
