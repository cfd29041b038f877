//! The detector: pyramid, deformable encoder with a two-stage proposal head,
//! query selection and the refining decoder.
//!
//! [`Detector::forward`] records the whole pass on a [`Graph`] so the loss can
//! back-propagate through it. The value-level entry points
//! ([`Detector::encoder_forward`], [`Detector::decoder_forward`],
//! [`Detector::predict`]) wrap the same code for inference and inspection.

mod decoder;
mod encoder;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{DecoderLayer, LayerVars};
pub use encoder::EncoderLayer;

use crate::coord::{
    index_per_second, make_reference_grid, time_to_index, CoordExpression, GridMode, OffsetPair,
    ReferenceGrid,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, LayerNorm, Linear, Mlp};
use crate::params::{uniform, ParamId, ParamStore};
use crate::pyramid::{FeaturePyramid, PyramidConfig, PyramidModule};
use crate::scalar::{sigmoid, Scalar};
use crate::select::{
    min_sector_population, plan_sectors, select_adaptive, select_fixed_topk, QuerySet, SectorPlan,
    SelectConfig, SelectMode,
};
use crate::tape::{DeformLayout, Graph, Var};
use crate::tensor::Tensor;
use crate::timeline::{clip_to_video, DetectionSet, FeatureSequence, Segment, VideoMeta};

use decoder::{DecoderContext, PRIOR_LOGIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Sampling points per level and head.
    pub points_per_level: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub encoder_self_attn: bool,
    pub decoder_self_attn: bool,
    pub decoder_cross_attn: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 4,
            points_per_level: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 4,
            encoder_self_attn: true,
            decoder_self_attn: true,
            decoder_cross_attn: true,
        }
    }
}

/// How segments are expressed and where the encoder references sit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordConfig {
    pub expression: CoordExpression,
    pub mode: GridMode,
    /// Reference half-width in snippets of the level.
    pub base_scale: f64,
}

impl Default for CoordConfig {
    fn default() -> Self {
        Self {
            expression: CoordExpression::TimeAligned,
            mode: GridMode::UnitConsistent,
            base_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub pyramid: PyramidConfig,
    pub attention: AttentionConfig,
    pub ffn_dim: usize,
    pub coord: CoordConfig,
    pub select: SelectConfig,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_classes: 5,
            pyramid: PyramidConfig::default(),
            attention: AttentionConfig::default(),
            ffn_dim: 128,
            coord: CoordConfig::default(),
            select: SelectConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.select.validate()?;
        let a = &self.attention;
        if self.channels == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "channels, num_classes and ffn_dim must be >= 1".into(),
            ));
        }
        if a.num_heads == 0
            || a.points_per_level == 0
            || a.num_encoder_layers == 0
            || a.num_decoder_layers == 0
        {
            return Err(Error::Config("attention counts must be >= 1".into()));
        }
        let d = self.pyramid.model_dim;
        if d % a.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {d} is not divisible by model.heads {}",
                a.num_heads
            )));
        }
        if d % 4 != 0 {
            return Err(Error::Config(format!(
                "model.dim must be a multiple of 4, got {d}"
            )));
        }
        if !(self.coord.base_scale.is_finite() && self.coord.base_scale > 0.0) {
            return Err(Error::Config(format!(
                "coord.base_scale must be > 0, got {}",
                self.coord.base_scale
            )));
        }
        Ok(())
    }
}

/// Encoder result for one video.
///
/// `memory` stacks the levels row-wise (level 1 first); `level_lengths`
/// recovers the split. Proposals are the encoder offsets applied to the
/// reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T: Scalar> {
    pub memory: Tensor<T>,
    pub level_lengths: Vec<usize>,
    pub scores: Vec<f64>,
    pub offsets: Vec<OffsetPair<f64>>,
    pub proposals: Vec<Segment<f64>>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn num_positions(&self) -> usize {
        self.scores.len()
    }

    /// Memory rows of one level (1-based).
    pub fn level(&self, level: usize) -> Tensor<T> {
        let start: usize = self.level_lengths[..level - 1].iter().sum();
        let len = self.level_lengths[level - 1];
        let d = self.memory.cols;
        Tensor::from_vec(
            len,
            d,
            self.memory.data[start * d..(start + len) * d].to_vec(),
        )
    }
}

/// Decoder result: `segments[0]` are the selected proposals and
/// `segments[n]` the output of layer `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Scalar> {
    pub query_embeddings: Tensor<T>,
    pub segments: Vec<Vec<Segment<f64>>>,
    pub class_logits: Vec<Tensor<T>>,
}

/// Graph handles of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<T: Scalar> {
    pub grids: Vec<ReferenceGrid>,
    pub level_lengths: Vec<usize>,
    /// Present for adaptive selection.
    pub plan: Option<SectorPlan>,
    pub memory: Var,
    /// `n x 1` foreground logits at every pyramid position.
    pub enc_logits: Var,
    pub enc_offsets: Var,
    /// `n x 2` encoder proposals in seconds.
    pub enc_segments: Var,
    /// Softmax weights of each encoder layer (empty when self-attention is off).
    pub enc_attention: Vec<Var>,
    pub queries: QuerySet<T>,
    pub seg0: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone, PartialEq)]
struct Modules {
    pyramid: PyramidModule,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_class: Linear,
    enc_offset: Mlp,
    query_init: Linear,
    query_norm: LayerNorm,
    query_pos: Linear,
    decoder: Vec<DecoderLayer>,
}

/// A detector with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    modules: Modules,
}

struct EncVars {
    memory: Var,
    logits: Var,
    offsets: Var,
    segments: Var,
    attention: Vec<Var>,
    layout: Arc<DeformLayout>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.pyramid.model_dim;
        let a = cfg.attention;
        let levels = cfg.pyramid.num_levels;
        let pyramid = PyramidModule::new(&mut store, &mut rng, cfg.channels, cfg.pyramid);
        let level_embed = store.add("level_embed", uniform(&mut rng, levels, d, 0.1));
        let encoder = (0..a.num_encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("encoder{i}"),
                    d,
                    cfg.ffn_dim,
                    a.num_heads,
                    levels,
                    a.points_per_level,
                )
            })
            .collect();
        let enc_class = Linear::with_bias(
            &mut store,
            &mut rng,
            "enc_head.class",
            d,
            1,
            T::lit(PRIOR_LOGIT),
        );
        let enc_offset = Mlp {
            hidden: Linear::new(&mut store, &mut rng, "enc_head.offset.hidden", d, d),
            out: Linear::zeroed(&mut store, "enc_head.offset.out", d, vec![T::zero(); 2]),
        };
        let query_init = Linear::new(&mut store, &mut rng, "query.init", d, d);
        let query_norm = LayerNorm::new(&mut store, "query.norm", d);
        let query_pos = Linear::new(&mut store, &mut rng, "query.pos", d, d);
        let decoder = (0..a.num_decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("decoder{i}"),
                    d,
                    cfg.ffn_dim,
                    a.num_heads,
                    levels,
                    a.points_per_level,
                    cfg.num_classes,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            params: store,
            modules: Modules {
                pyramid,
                level_embed,
                encoder,
                enc_class,
                enc_offset,
                query_init,
                query_norm,
                query_pos,
                decoder,
            },
        })
    }

    pub fn pyramid_module(&self) -> &PyramidModule {
        &self.modules.pyramid
    }

    fn check_video(&self, meta: &VideoMeta) -> Result<()> {
        meta.validate()?;
        if meta.channels != self.cfg.channels {
            return Err(Error::Shape {
                name: format!("features of `{}`", meta.video_id),
                expected: format!("{} channels", self.cfg.channels),
                found: format!("{} channels", meta.channels),
            });
        }
        if meta.duration_sec < meta.snippet_sec() {
            return Err(Error::InvalidArgument(format!(
                "video `{}` is shorter than one snippet ({} s < {} s)",
                meta.video_id,
                meta.duration_sec,
                meta.snippet_sec()
            )));
        }
        Ok(())
    }

    fn grids(&self, meta: &VideoMeta) -> Result<Vec<ReferenceGrid>> {
        let l = self.cfg.pyramid.num_levels;
        (1..=l)
            .map(|level| {
                make_reference_grid(
                    meta,
                    level,
                    l,
                    self.cfg.coord.base_scale,
                    self.cfg.coord.mode,
                )
            })
            .collect()
    }

    fn layout(&self, lengths: &[usize]) -> Arc<DeformLayout> {
        let mut start = 0;
        let levels = lengths
            .iter()
            .map(|&len| {
                let s = start;
                start += len;
                (s, len)
            })
            .collect();
        Arc::new(DeformLayout {
            heads: self.cfg.attention.num_heads,
            points: self.cfg.attention.points_per_level,
            levels,
        })
    }

    fn encode(
        &self,
        g: &mut Graph<'_, T>,
        levels: &[Var],
        grids: &[ReferenceGrid],
        meta: &VideoMeta,
    ) -> EncVars {
        let m = &self.modules;
        let d = self.cfg.pyramid.model_dim;
        let lengths: Vec<usize> = levels.iter().map(|v| g.value(*v).rows).collect();
        let total: usize = lengths.iter().sum();
        let layout = self.layout(&lengths);
        let nl = lengths.len();

        let table = sinusoid_table::<T>(lengths[0], d);
        let mut sin = Tensor::zeros(total, d);
        let mut level_idx = Vec::with_capacity(total);
        let mut ref_loc = Tensor::zeros(total, layout.columns());
        let mut refs = Tensor::zeros(total, 2);
        let mut n = 0;
        for (l, len) in lengths.iter().enumerate() {
            for t in 0..*len {
                sin.row_mut(n).copy_from_slice(table.row(t));
                level_idx.push(l);
                let time = grids[l].centers[t];
                refs.data[2 * n] = T::lit(time);
                refs.data[2 * n + 1] = T::lit(grids[l].width);
                for h in 0..layout.heads {
                    for lv in 0..nl {
                        let idx = T::lit(time_to_index(time, meta, lv + 1));
                        for p in 0..layout.points {
                            ref_loc.data[n * layout.columns() + layout.column(h, lv, p)] = idx;
                        }
                    }
                }
                n += 1;
            }
        }
        let mut x = g.concat_rows(levels);
        let sin = g.constant(sin);
        let le = g.param(m.level_embed);
        let le = g.gather_rows(le, &level_idx);
        let pos = g.add(sin, le);
        let ref_loc = g.constant(ref_loc);
        let mut attention = Vec::new();
        for layer in &m.encoder {
            let (next, w) = layer.forward(
                g,
                x,
                pos,
                ref_loc,
                &layout,
                self.cfg.attention.encoder_self_attn,
            );
            x = next;
            attention.extend(w);
        }
        let logits = m.enc_class.forward(g, x);
        let offsets = m.enc_offset.forward(g, x);
        let refs = g.constant(refs);
        let segments = g.segment_update(
            refs,
            offsets,
            self.cfg.coord.expression,
            T::lit(meta.duration_sec),
        );
        EncVars {
            memory: x,
            logits,
            offsets,
            segments,
            attention,
            layout,
        }
    }

    fn encoder_values(
        &self,
        g: &Graph<'_, T>,
        ev: &EncVars,
        lengths: Vec<usize>,
    ) -> EncoderOutput<T> {
        let logits = g.value(ev.logits);
        let off = g.value(ev.offsets);
        let seg = g.value(ev.segments);
        let n = logits.rows;
        EncoderOutput {
            memory: g.value(ev.memory).clone(),
            level_lengths: lengths,
            scores: (0..n)
                .map(|i| sigmoid(logits.data[i].to_f64_lossy()))
                .collect(),
            offsets: (0..n)
                .map(|i| OffsetPair {
                    d_center: off.get(i, 0).to_f64_lossy(),
                    d_logwidth: off.get(i, 1).to_f64_lossy(),
                })
                .collect(),
            proposals: (0..n)
                .map(|i| Segment {
                    center: seg.get(i, 0).to_f64_lossy(),
                    width: seg.get(i, 1).to_f64_lossy(),
                })
                .collect(),
        }
    }

    /// Runs the configured selector, clamping `K` (or `N`) to what the video
    /// can supply so that short videos still produce queries.
    pub fn select(
        &self,
        enc: &EncoderOutput<T>,
        grids: &[ReferenceGrid],
    ) -> Result<(QuerySet<T>, Option<SectorPlan>)> {
        let sc = &self.cfg.select;
        match sc.mode {
            SelectMode::Adaptive => {
                let plan = plan_sectors(grids[0].centers.len(), sc.t_sector);
                let k = sc.k.min(min_sector_population(grids, &plan)).max(1);
                let q = select_adaptive(enc, grids, &plan, k)?;
                Ok((q, Some(plan)))
            }
            SelectMode::Fixed => {
                let n = sc.fixed_n.min(enc.num_positions());
                Ok((select_fixed_topk(enc, grids, n)?, None))
            }
        }
    }

    fn decode(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        content: Var,
        seg0: Var,
        layout: &Arc<DeformLayout>,
        meta: &VideoMeta,
    ) -> (Var, Vec<LayerVars>) {
        let m = &self.modules;
        let a = self.cfg.attention;
        let d = self.cfg.pyramid.model_dim;
        let ctx = DecoderContext {
            layout,
            per_second: (1..=layout.levels.len())
                .map(|l| index_per_second(meta, l))
                .collect(),
            expr: self.cfg.coord.expression,
            duration: meta.duration_sec,
            heads: a.num_heads,
            self_attn: a.decoder_self_attn,
            cross_attn: a.decoder_cross_attn,
        };
        let tau = T::lit(meta.snippet_sec());
        let init = m.query_init.forward(g, content);
        let mut tgt = m.query_norm.forward(g, init);
        let mut seg = seg0;
        let mut layers = Vec::with_capacity(m.decoder.len());
        for layer in &m.decoder {
            let emb = g.segment_embed(seg, tau, d);
            let qpos = m.query_pos.forward(g, emb);
            let (next, lv) = layer.forward(g, &ctx, tgt, qpos, seg, memory);
            tgt = next;
            seg = lv.segments;
            layers.push(lv);
        }
        (tgt, layers)
    }

    /// Records the complete pass for one video on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        video: &FeatureSequence<T>,
    ) -> Result<ForwardVars<T>> {
        let meta = &video.meta;
        self.check_video(meta)?;
        let grids = self.grids(meta)?;
        let z1 = self.modules.pyramid.embed(g, video)?;
        let levels = self.modules.pyramid.build(g, z1, true);
        let lengths: Vec<usize> = levels.iter().map(|v| g.value(*v).rows).collect();
        let ev = self.encode(g, &levels, &grids, meta);
        let enc = self.encoder_values(g, &ev, lengths.clone());
        let (queries, plan) = self.select(&enc, &grids)?;
        let positions = queries.positions();
        let content = g.gather_rows(ev.memory, &positions);
        let seg0 = g.gather_rows(ev.segments, &positions);
        let (_, layers) = self.decode(g, ev.memory, content, seg0, &ev.layout, meta);
        Ok(ForwardVars {
            grids,
            level_lengths: lengths,
            plan,
            memory: ev.memory,
            enc_logits: ev.logits,
            enc_offsets: ev.offsets,
            enc_segments: ev.segments,
            enc_attention: ev.attention,
            queries,
            seg0,
            layers,
        })
    }

    /// Builds the feature pyramid of a video.
    pub fn pyramid(&self, video: &FeatureSequence<T>) -> Result<FeaturePyramid<T>> {
        self.check_video(&video.meta)?;
        self.modules.pyramid.pyramid(
            &self.params,
            video,
            self.cfg.coord.base_scale,
            self.cfg.coord.mode,
        )
    }

    /// Encoder over a precomputed pyramid.
    pub fn encoder_forward(
        &self,
        pyramid: &FeaturePyramid<T>,
        meta: &VideoMeta,
    ) -> Result<EncoderOutput<T>> {
        if pyramid.levels.len() != self.cfg.pyramid.num_levels {
            return Err(Error::InvalidArgument(format!(
                "pyramid has {} levels, model expects {}",
                pyramid.levels.len(),
                self.cfg.pyramid.num_levels
            )));
        }
        let mut g = Graph::new(&self.params);
        let levels: Vec<Var> = pyramid
            .levels
            .iter()
            .map(|l| g.constant(l.clone()))
            .collect();
        let ev = self.encode(&mut g, &levels, &pyramid.grids, meta);
        Ok(self.encoder_values(&g, &ev, pyramid.lengths()))
    }

    /// Decoder over a given encoder output and query set.
    pub fn decoder_forward(
        &self,
        enc: &EncoderOutput<T>,
        queries: &QuerySet<T>,
        meta: &VideoMeta,
    ) -> Result<DecoderState<T>> {
        if queries.is_empty() {
            return Err(Error::InvalidArgument(
                "decoder needs at least one query".into(),
            ));
        }
        let mut g = Graph::new(&self.params);
        let memory = g.constant(enc.memory.clone());
        let content = g.constant(queries.content.clone());
        let seg0: Vec<T> = queries
            .items
            .iter()
            .flat_map(|q| [T::lit(q.center), T::lit(q.width)])
            .collect();
        let seg0 = g.constant(Tensor::from_vec(queries.len(), 2, seg0));
        let layout = self.layout(&enc.level_lengths);
        let (tgt, layers) = self.decode(&mut g, memory, content, seg0, &layout, meta);
        let mut segments = vec![segments_of(g.value(seg0))];
        segments.extend(layers.iter().map(|lv| segments_of(g.value(lv.segments))));
        Ok(DecoderState {
            query_embeddings: g.value(tgt).clone(),
            segments,
            class_logits: layers.iter().map(|lv| g.value(lv.logits).clone()).collect(),
        })
    }

    /// NMS-free detections: one entry per query with its best class.
    pub fn predict(&self, video: &FeatureSequence<T>) -> Result<DetectionSet> {
        self.predict_capped(video, None)
    }

    /// Like [`Detector::predict`], keeping at most `cap` highest-scoring items.
    pub fn predict_capped(
        &self,
        video: &FeatureSequence<T>,
        cap: Option<usize>,
    ) -> Result<DetectionSet> {
        let mut g = Graph::new(&self.params);
        let fv = self.forward(&mut g, video)?;
        let last = fv.layers.last().expect("at least one decoder layer");
        Ok(detections_from(
            &video.meta,
            g.value(last.segments),
            g.value(last.logits),
            cap,
        ))
    }
}

fn segments_of<T: Scalar>(t: &Tensor<T>) -> Vec<Segment<f64>> {
    (0..t.rows)
        .map(|r| Segment {
            center: t.get(r, 0).to_f64_lossy(),
            width: t.get(r, 1).to_f64_lossy(),
        })
        .collect()
}

/// Turns final-layer segments and logits into a detection set: each query
/// contributes its top class with a sigmoid score and a clipped segment.
pub fn detections_from<T: Scalar>(
    meta: &VideoMeta,
    segments: &Tensor<T>,
    logits: &Tensor<T>,
    cap: Option<usize>,
) -> DetectionSet {
    let mut out = DetectionSet::new(meta.video_id.clone());
    for r in 0..segments.rows {
        let row = logits.row(r);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        let seg = Segment {
            center: segments.get(r, 0).to_f64_lossy(),
            width: segments.get(r, 1).to_f64_lossy(),
        };
        let score = sigmoid(row[best].to_f64_lossy());
        if !(seg.center.is_finite()
            && seg.width.is_finite()
            && seg.width > 0.0
            && score.is_finite())
        {
            log::warn!("dropping non-finite prediction in `{}`", meta.video_id);
            continue;
        }
        out.push(clip_to_video(&seg, meta), best, score);
    }
    if let Some(cap) = cap {
        out.items.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.items.truncate(cap);
    }
    out
}
