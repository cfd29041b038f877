//! Query decoder: full self-attention among queries, segment-conditioned
//! deformable cross-attention into the encoder memory, and per-layer heads.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::coord::CoordExpression;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{DeformLayout, Graph, Var};

/// Focal-loss prior: heads start predicting foreground probability 0.01.
pub(crate) const PRIOR_LOGIT: f64 = -4.595_119_850_134_59;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_out: Linear,
    pub norm_self: LayerNorm,
    pub cross_sampling: Linear,
    pub cross_attention: Linear,
    pub cross_value: Linear,
    pub cross_out: Linear,
    pub norm_cross: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
    pub class_head: Linear,
    pub offset_head: Mlp,
}

/// Graph handles produced by one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// Segments entering the layer (`n x 2`, seconds).
    pub prev: Var,
    /// Raw offsets predicted by the layer (`n x 2`).
    pub offsets: Var,
    /// Refined segments (`n x 2`, seconds).
    pub segments: Var,
    /// Class logits (`n x classes`).
    pub logits: Var,
}

pub(crate) struct DecoderContext<'a> {
    pub layout: &'a Arc<DeformLayout>,
    pub per_second: Vec<f64>,
    pub expr: CoordExpression,
    pub duration: f64,
    pub heads: usize,
    pub self_attn: bool,
    pub cross_attn: bool,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        classes: usize,
    ) -> Self {
        let cols = heads * levels * points;
        // sampling points start evenly spread across the segment
        let mut bias = Vec::with_capacity(cols);
        for _ in 0..heads * levels {
            for p in 0..points {
                bias.push(T::lit((2 * p + 1) as f64 / points as f64 - 1.0));
            }
        }
        Self {
            self_q: Linear::new(store, rng, &format!("{name}.self_q"), dim, dim),
            self_k: Linear::new(store, rng, &format!("{name}.self_k"), dim, dim),
            self_v: Linear::new(store, rng, &format!("{name}.self_v"), dim, dim),
            self_out: Linear::new(store, rng, &format!("{name}.self_out"), dim, dim),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            cross_sampling: Linear::zeroed(store, &format!("{name}.cross_sampling"), dim, bias),
            cross_attention: Linear::zeroed(
                store,
                &format!("{name}.cross_attention"),
                dim,
                vec![T::zero(); cols],
            ),
            cross_value: Linear::new(store, rng, &format!("{name}.cross_value"), dim, dim),
            cross_out: Linear::new(store, rng, &format!("{name}.cross_out"), dim, dim),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            ffn: Mlp {
                hidden: Linear::new(store, rng, &format!("{name}.ffn.hidden"), dim, ffn_dim),
                out: Linear::new(store, rng, &format!("{name}.ffn.out"), ffn_dim, dim),
            },
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            class_head: Linear::with_bias(
                store,
                rng,
                &format!("{name}.class_head"),
                dim,
                classes,
                T::lit(PRIOR_LOGIT),
            ),
            offset_head: Mlp {
                hidden: Linear::new(store, rng, &format!("{name}.offset_head.hidden"), dim, dim),
                out: Linear::zeroed(
                    store,
                    &format!("{name}.offset_head.out"),
                    dim,
                    vec![T::zero(); 2],
                ),
            },
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ctx: &DecoderContext<'_>,
        tgt: Var,
        qpos: Var,
        segments: Var,
        memory: Var,
    ) -> (Var, LayerVars) {
        let mut tgt = tgt;
        if ctx.self_attn {
            let q_in = g.add(tgt, qpos);
            let q = self.self_q.forward(g, q_in);
            let k = self.self_k.forward(g, q_in);
            let v = self.self_v.forward(g, tgt);
            let (n, dim) = g.value(tgt).shape();
            let dh = dim / ctx.heads;
            let scale = T::lit(1.0 / (dh as f64).sqrt());
            let mut outs = Vec::with_capacity(ctx.heads);
            for h in 0..ctx.heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul(qh, kh, true);
                let s = g.scale(s, scale);
                let p = g.softmax_groups(s, n);
                outs.push(g.matmul(p, vh, false));
            }
            let o = g.concat_cols(&outs);
            let o = self.self_out.forward(g, o);
            let res = g.add(tgt, o);
            tgt = self.norm_self.forward(g, res);
        }
        if ctx.cross_attn {
            let q = g.add(tgt, qpos);
            let off = self.cross_sampling.forward(g, q);
            let per_second: Vec<T> = ctx.per_second.iter().map(|v| T::lit(*v)).collect();
            let loc = g.sample_locations(segments, off, ctx.layout.clone(), per_second);
            let logits = self.cross_attention.forward(g, q);
            let w = g.softmax_groups(logits, ctx.layout.samples_per_head());
            let v = self.cross_value.forward(g, memory);
            let sampled = g.deform_sample(v, loc, w, ctx.layout.clone());
            let o = self.cross_out.forward(g, sampled);
            let res = g.add(tgt, o);
            tgt = self.norm_cross.forward(g, res);
        }
        let f = self.ffn.forward(g, tgt);
        let res = g.add(tgt, f);
        tgt = self.norm_ffn.forward(g, res);

        let logits = self.class_head.forward(g, tgt);
        let offsets = self.offset_head.forward(g, tgt);
        let refined = g.segment_update(segments, offsets, ctx.expr, T::lit(ctx.duration));
        (
            tgt,
            LayerVars {
                prev: segments,
                offsets,
                segments: refined,
                logits,
            },
        )
    }
}
