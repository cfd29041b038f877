//! Set-prediction loss: focal classification, 1D DIoU and log-width
//! regression under per-layer Hungarian matching, plus the encoder's binary
//! proposal loss.
//!
//! Losses are evaluated on plain values and return gradients with respect to
//! the predicted segments and logits, which the trainer feeds into the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{hungarian_match, CostMatrix, MatchResult};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;
use crate::timeline::{ActionInstance, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_diou: f64,
    pub w_logwidth: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Supervise every decoder layer, not only the last.
    pub aux_enabled: bool,
    /// Supervise the encoder proposals.
    pub encoder_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_diou: 2.0,
            w_logwidth: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            aux_enabled: true,
            encoder_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.w_cls", self.w_cls),
            ("loss.w_diou", self.w_diou),
            ("loss.w_logwidth", self.w_logwidth),
            ("loss.focal_gamma", self.focal_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!(
                "loss.focal_alpha must lie in [0, 1], got {}",
                self.focal_alpha
            )));
        }
        Ok(())
    }
}

/// Focal loss of one probability.
pub fn focal_loss(prob: f64, is_positive: bool, gamma: f64, alpha: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "focal loss needs 0 < p < 1, got {prob}"
        )));
    }
    Ok(if is_positive {
        -alpha * (1.0 - prob).powf(gamma) * prob.ln()
    } else {
        -(1.0 - alpha) * prob.powf(gamma) * (1.0 - prob).ln()
    })
}

/// Focal loss of a logit and its derivative, stable for large magnitudes.
pub fn focal_from_logit(x: f64, is_positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let ln_p = -softplus(-x);
    let ln_q = -softplus(x);
    if is_positive {
        let m = q.powf(gamma);
        (-alpha * m * ln_p, alpha * m * (gamma * p * ln_p - q))
    } else {
        let m = p.powf(gamma);
        (
            -(1.0 - alpha) * m * ln_q,
            -(1.0 - alpha) * m * (gamma * q * ln_q - p),
        )
    }
}

/// 1D distance-IoU: IoU minus squared center distance over squared enclosing span.
pub fn diou(a: &Segment, b: &Segment) -> f64 {
    diou_with_grad(a, b).0
}

/// DIoU and its gradient with respect to `(center, width)` of `pred`.
pub fn diou_with_grad(pred: &Segment, gt: &Segment) -> (f64, [f64; 2]) {
    let (s, e) = (pred.start(), pred.end());
    let (sg, eg) = (gt.start(), gt.end());
    let inter = (e.min(eg) - s.max(sg)).max(0.0);
    let union = (e - s) + (eg - sg) - inter;
    let (di_ds, di_de) = if inter > 0.0 {
        (
            if s > sg { -1.0 } else { 0.0 },
            if e < eg { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let (du_ds, du_de) = (-1.0 - di_ds, 1.0 - di_de);
    let iou = inter / union;
    let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
    let diou_de = (di_de * union - inter * du_de) / (union * union);

    let dc = 0.5 * (s + e) - 0.5 * (sg + eg);
    let span = e.max(eg) - s.min(sg);
    let rho = dc * dc;
    let pen = rho / (span * span);
    let dspan_ds = if s < sg { -1.0 } else { 0.0 };
    let dspan_de = if e > eg { 1.0 } else { 0.0 };
    let dpen_ds = dc / (span * span) - 2.0 * rho * dspan_ds / (span * span * span);
    let dpen_de = dc / (span * span) - 2.0 * rho * dspan_de / (span * span * span);

    let g_s = diou_ds - dpen_ds;
    let g_e = diou_de - dpen_de;
    (iou - pen, [g_s + g_e, g_e - g_s])
}

/// `|ln w - ln w_gt|` and its derivative with respect to `w`.
pub fn log_width_with_grad(width: f64, gt_width: f64) -> (f64, f64) {
    let d = width.ln() - gt_width.ln();
    let g = if d == 0.0 { 0.0 } else { d.signum() / width };
    (d.abs(), g)
}

const COST_EPS: f64 = 1e-8;

/// Matching cost of one prediction against one ground truth.
pub fn match_cost(
    pred: &Segment,
    probs: &[f64],
    gt: &ActionInstance,
    w: &LossWeights,
) -> Result<f64> {
    if !(gt.end > gt.start) {
        return Err(Error::InvalidArgument(format!(
            "ground truth [{}, {}] has no length",
            gt.start, gt.end
        )));
    }
    let p = *probs.get(gt.label).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "label {} outside {} classes",
            gt.label,
            probs.len()
        ))
    })?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "class probability {p} outside [0, 1]"
        )));
    }
    Ok(cost_unchecked(pred, p, &gt.segment(), w))
}

fn cost_unchecked(pred: &Segment, p: f64, gt: &Segment, w: &LossWeights) -> f64 {
    let (a, g) = (w.focal_alpha, w.focal_gamma);
    let pos = -a * (1.0 - p).powf(g) * (p + COST_EPS).ln();
    let neg = -(1.0 - a) * p.powf(g) * (1.0 - p + COST_EPS).ln();
    w.w_cls * (pos - neg)
        + w.w_diou * (1.0 - diou(pred, gt))
        + w.w_logwidth * (pred.width.ln() - gt.width.ln()).abs()
}

/// Per-term contributions, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub diou: f64,
    pub logwidth: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.diou + self.logwidth
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.cls += o.cls;
        self.diou += o.diou;
        self.logwidth += o.logwidth;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            cls: self.cls * s,
            diou: self.diou * s,
            logwidth: self.logwidth * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub decoder: LossTerms,
    pub encoder: LossTerms,
    /// Weighted total of each decoder layer (zero for unsupervised layers).
    pub per_layer: Vec<f64>,
}

/// Predictions of one stage: `n x 2` segments in seconds and `n x classes` logits.
#[derive(Debug, Clone, Copy)]
pub struct StagePrediction<'a, T: Scalar> {
    pub segments: &'a Tensor<T>,
    pub logits: &'a Tensor<T>,
}

/// Gradients with respect to the predictions of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrad<T: Scalar> {
    pub segments: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T: Scalar> {
    pub breakdown: LossBreakdown,
    pub layer_grads: Vec<StageGrad<T>>,
    pub encoder_grad: Option<StageGrad<T>>,
    /// Assignment of each supervised decoder layer (`None` when skipped).
    pub layer_matches: Vec<Option<MatchResult>>,
    pub encoder_match: Option<MatchResult>,
}

fn segment_at<T: Scalar>(t: &Tensor<T>, r: usize) -> Segment {
    Segment {
        center: t.get(r, 0).to_f64_lossy(),
        width: t.get(r, 1).to_f64_lossy(),
    }
}

/// Hungarian assignment for one stage. With a single logit column the
/// prediction is class-agnostic and every ground truth counts as that class.
pub fn match_stage<T: Scalar>(
    pred: StagePrediction<'_, T>,
    gt: &[ActionInstance],
    w: &LossWeights,
) -> Result<MatchResult> {
    let n = pred.segments.rows;
    let classes = pred.logits.cols;
    let mut data = Vec::with_capacity(n * gt.len());
    for q in 0..n {
        let seg = segment_at(pred.segments, q);
        let row = pred.logits.row(q);
        for g in gt {
            let label = if classes == 1 { 0 } else { g.label };
            let p = sigmoid(row[label].to_f64_lossy());
            data.push(cost_unchecked(&seg, p, &g.segment(), w));
        }
    }
    hungarian_match(&CostMatrix::new(n, gt.len(), data)?)
}

/// Loss and gradients of one stage under a fixed assignment.
pub fn stage_loss<T: Scalar>(
    pred: StagePrediction<'_, T>,
    gt: &[ActionInstance],
    matches: &MatchResult,
    w: &LossWeights,
) -> Result<(LossTerms, StageGrad<T>)> {
    let (n, classes) = pred.logits.shape();
    if pred.segments.shape() != (n, 2) {
        return Err(Error::Shape {
            name: "predicted segments".into(),
            expected: format!("{n} x 2"),
            found: format!("{:?}", pred.segments.shape()),
        });
    }
    let mut positive = vec![None; n];
    for &(q, g) in &matches.pairs {
        let label = if classes == 1 { 0 } else { gt[g].label };
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} outside {classes} classes"
            )));
        }
        positive[q] = Some(label);
    }
    let norm = matches.pairs.len().max(1) as f64;
    let mut terms = LossTerms::default();
    let mut g_logits = Tensor::zeros(n, classes);
    for q in 0..n {
        for c in 0..classes {
            let x = pred.logits.get(q, c).to_f64_lossy();
            let (l, d) = focal_from_logit(x, positive[q] == Some(c), w.focal_gamma, w.focal_alpha);
            terms.cls += w.w_cls * l / norm;
            g_logits.data[q * classes + c] = T::lit(w.w_cls * d / norm);
        }
    }
    let mut g_seg = Tensor::zeros(n, 2);
    for &(q, g) in &matches.pairs {
        let p = segment_at(pred.segments, q);
        let t = gt[g].segment();
        let (di, dgrad) = diou_with_grad(&p, &t);
        let (lw, lgrad) = log_width_with_grad(p.width, t.width);
        terms.diou += w.w_diou * (1.0 - di) / norm;
        terms.logwidth += w.w_logwidth * lw / norm;
        g_seg.data[2 * q] = T::lit(-w.w_diou * dgrad[0] / norm);
        g_seg.data[2 * q + 1] = T::lit((-w.w_diou * dgrad[1] + w.w_logwidth * lgrad) / norm);
    }
    if !terms.total().is_finite() {
        return Err(Error::InvalidArgument("non-finite loss".into()));
    }
    Ok((
        terms,
        StageGrad {
            segments: g_seg,
            logits: g_logits,
        },
    ))
}

/// Full loss over decoder layers and, optionally, the encoder proposals
/// (whose logits must have a single foreground column).
pub fn total_loss<T: Scalar>(
    layers: &[StagePrediction<'_, T>],
    encoder: Option<StagePrediction<'_, T>>,
    gt: &[ActionInstance],
    w: &LossWeights,
) -> Result<LossOutput<T>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one decoder layer is required".into(),
        ));
    }
    let mut out = LossOutput {
        breakdown: LossBreakdown::default(),
        layer_grads: Vec::with_capacity(layers.len()),
        encoder_grad: None,
        layer_matches: Vec::with_capacity(layers.len()),
        encoder_match: None,
    };
    let last = layers.len() - 1;
    for (i, pred) in layers.iter().enumerate() {
        if i != last && !w.aux_enabled {
            out.breakdown.per_layer.push(0.0);
            out.layer_grads.push(StageGrad {
                segments: Tensor::zeros(pred.segments.rows, 2),
                logits: Tensor::zeros(pred.logits.rows, pred.logits.cols),
            });
            out.layer_matches.push(None);
            continue;
        }
        let m = match_stage(*pred, gt, w)?;
        let (terms, grad) = stage_loss(*pred, gt, &m, w)?;
        out.breakdown.decoder.add(&terms);
        out.breakdown.per_layer.push(terms.total());
        out.layer_grads.push(grad);
        out.layer_matches.push(Some(m));
    }
    if let Some(enc) = encoder.filter(|_| w.encoder_enabled) {
        if enc.logits.cols != 1 {
            return Err(Error::Shape {
                name: "encoder logits".into(),
                expected: "1 column".into(),
                found: format!("{} columns", enc.logits.cols),
            });
        }
        let m = match_stage(enc, gt, w)?;
        let (terms, grad) = stage_loss(enc, gt, &m, w)?;
        out.breakdown.encoder = terms;
        out.encoder_grad = Some(grad);
        out.encoder_match = Some(m);
    }
    out.breakdown.total = out.breakdown.decoder.total() + out.breakdown.encoder.total();
    Ok(out)
}
