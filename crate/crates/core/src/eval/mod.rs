//! Detection metrics and analysis instruments.

mod instability;
mod nms;
mod probe;
mod report;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use instability::{instability, InstabilityLog};
pub use nms::nms;
pub use probe::{noise_probe, NoiseTarget, ProbeCache, ProbeResult};
pub use report::{evaluate_detections, predict_all, EvalReport, PostProcess};

use crate::error::{Error, Result};
use crate::timeline::{interval_iou, ActionInstance, Detection, DetectionSet};

/// Ground-truth annotations keyed by video id.
pub type GroundTruth = BTreeMap<String, Vec<ActionInstance>>;

pub const BUCKET_LABELS: [&str; 5] = ["XS", "S", "M", "L", "XL"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub top_n_cap: Option<usize>,
    /// Four increasing interior edges in seconds splitting lengths into
    /// XS/S/M/L/XL; `None` uses quintiles of the ground truth.
    pub length_edges: Option<[f64; 4]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            top_n_cap: None,
            length_edges: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config(
                "eval.iou needs at least one threshold".into(),
            ));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!(
                "IoU thresholds must lie in (0, 1]: {:?}",
                self.iou_thresholds
            )));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "IoU thresholds must be strictly increasing".into(),
            ));
        }
        if let Some(e) = self.length_edges {
            if e.windows(2).any(|w| w[1] <= w[0]) || e[0] <= 0.0 {
                return Err(Error::Config(format!(
                    "length bucket edges must be positive and increasing: {e:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ranked<'a> {
    video: &'a str,
    det: &'a Detection,
}

fn rank_order(a: &Ranked<'_>, b: &Ranked<'_>) -> Ordering {
    b.det
        .score
        .total_cmp(&a.det.score)
        .then(a.det.segment.start().total_cmp(&b.det.segment.start()))
        .then(a.video.cmp(b.video))
        .then(a.det.segment.end().total_cmp(&b.det.segment.end()))
}

/// Greedy assignment in score order: each prediction takes the unmatched
/// ground truth of its class with the highest IoU at or above `thr`.
/// Returns the per-prediction TP flags (in ranked order) and per-video gt hits.
fn greedy_assign<'a>(
    ranked: &[Ranked<'a>],
    gts: &'a GroundTruth,
    class: usize,
    thr: f64,
) -> (Vec<bool>, BTreeMap<&'a str, Vec<bool>>) {
    let mut hit: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for r in ranked {
        let mut best: Option<(f64, usize)> = None;
        if let (Some(list), Some(used)) = (gts.get(r.video), hit.get(r.video)) {
            for (i, g) in list.iter().enumerate() {
                if g.label != class || used[i] {
                    continue;
                }
                let iou = interval_iou(r.det.segment.start(), r.det.segment.end(), g.start, g.end);
                if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, i));
                }
            }
        }
        match best {
            Some((_, i)) => {
                hit.get_mut(r.video).unwrap()[i] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (tp, hit)
}

fn ranked_for_class<'a>(preds: &'a [DetectionSet], class: usize) -> Vec<Ranked<'a>> {
    let mut out: Vec<Ranked<'a>> = preds
        .iter()
        .flat_map(|set| {
            set.items
                .iter()
                .filter(move |d| d.label == class)
                .map(move |d| Ranked {
                    video: &set.video_id,
                    det: d,
                })
        })
        .collect();
    out.sort_by(rank_order);
    out
}

/// Area under the all-point interpolated precision/recall curve.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len() + 2);
    let mut prec = Vec::with_capacity(tp.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    let mut ntp = 0usize;
    for (i, t) in tp.iter().enumerate() {
        ntp += usize::from(*t);
        rec.push(ntp as f64 / num_gt as f64);
        prec.push(ntp as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

fn count_gt(gts: &GroundTruth, class: usize) -> usize {
    gts.values().flatten().filter(|g| g.label == class).count()
}

/// Average precision of one class at one IoU threshold (0 when the class
/// has no ground truth or no predictions).
pub fn average_precision(
    preds: &[DetectionSet],
    gts: &GroundTruth,
    class: usize,
    iou_thr: f64,
) -> f64 {
    let ranked = ranked_for_class(preds, class);
    let (tp, _) = greedy_assign(&ranked, gts, class, iou_thr);
    interpolated_ap(&tp, count_gt(gts, class))
}

/// mAP per threshold and averaged over thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    /// Classes that have ground truth, in increasing order.
    pub classes: Vec<usize>,
    /// `per_class[t][c]` is the AP of `classes[c]` at `thresholds[t]`.
    pub per_class: Vec<Vec<f64>>,
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

pub fn mean_ap(preds: &[DetectionSet], gts: &GroundTruth, cfg: &EvalConfig) -> MapTable {
    let mut classes: Vec<usize> = gts.values().flatten().map(|g| g.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class: Vec<Vec<f64>> = cfg
        .iou_thresholds
        .iter()
        .map(|&thr| {
            classes
                .iter()
                .map(|&c| average_precision(preds, gts, c, thr))
                .collect()
        })
        .collect();
    let per_threshold: Vec<f64> = per_class
        .iter()
        .map(|row| {
            if row.is_empty() {
                0.0
            } else {
                row.iter().sum::<f64>() / row.len() as f64
            }
        })
        .collect();
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
    MapTable {
        thresholds: cfg.iou_thresholds.clone(),
        classes,
        per_class,
        per_threshold,
        average,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub label: String,
    /// Lower edge in seconds (inclusive).
    pub lo: f64,
    /// Upper edge in seconds (exclusive); `None` for the open last bucket.
    pub hi: Option<f64>,
    pub count: usize,
    pub missed: usize,
    /// `None` for an empty bucket.
    pub rate: Option<f64>,
}

/// Interior edges at the 20/40/60/80 % quantiles of ground-truth lengths.
pub fn quintile_edges(gts: &GroundTruth) -> Result<[f64; 4]> {
    let mut lengths: Vec<f64> = gts.values().flatten().map(|g| g.length()).collect();
    if lengths.is_empty() {
        return Err(Error::InvalidArgument(
            "no ground truth to derive length buckets from".into(),
        ));
    }
    lengths.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (lengths.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        lengths[lo] + (lengths[hi] - lengths[lo]) * (pos - lo as f64)
    };
    Ok([q(0.2), q(0.4), q(0.6), q(0.8)])
}

/// False-negative rate per length bucket: a ground truth is missed when no
/// prediction of its class reaches IoU 0.5 under greedy matching.
pub fn false_negative_buckets(
    preds: &[DetectionSet],
    gts: &GroundTruth,
    cfg: &EvalConfig,
) -> Result<Vec<BucketRate>> {
    let edges = match cfg.length_edges {
        Some(e) => e,
        None => quintile_edges(gts)?,
    };
    let bounds = [0.0, edges[0], edges[1], edges[2], edges[3], f64::INFINITY];
    let mut out: Vec<BucketRate> = BUCKET_LABELS
        .iter()
        .enumerate()
        .map(|(i, l)| BucketRate {
            label: (*l).to_string(),
            lo: bounds[i],
            hi: bounds[i + 1].is_finite().then_some(bounds[i + 1]),
            count: 0,
            missed: 0,
            rate: None,
        })
        .collect();
    let mut classes: Vec<usize> = gts.values().flatten().map(|g| g.label).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let ranked = ranked_for_class(preds, c);
        let (_, hit) = greedy_assign(&ranked, gts, c, 0.5);
        for (vid, list) in gts {
            for (i, g) in list.iter().enumerate() {
                if g.label != c {
                    continue;
                }
                let len = g.length();
                let b = bounds[1..].iter().position(|hi| len < *hi).unwrap_or(4);
                out[b].count += 1;
                if !hit[vid.as_str()][i] {
                    out[b].missed += 1;
                }
            }
        }
    }
    for b in &mut out {
        if b.count > 0 {
            b.rate = Some(b.missed as f64 / b.count as f64);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    start: f64,
    end: f64,
    label: usize,
    score: f64,
}

/// `{video_id: [{start, end, label, score}]}` with keys in sorted order.
pub fn predictions_to_json(preds: &[DetectionSet]) -> serde_json::Value {
    let map: BTreeMap<&str, Vec<PredictionRecord>> = preds
        .iter()
        .map(|set| {
            let items = set
                .items
                .iter()
                .map(|d| PredictionRecord {
                    start: d.segment.start(),
                    end: d.segment.end(),
                    label: d.label,
                    score: d.score,
                })
                .collect();
            (set.video_id.as_str(), items)
        })
        .collect();
    serde_json::to_value(map).expect("predictions serialize")
}

pub fn write_predictions(path: &Path, preds: &[DetectionSet]) -> Result<()> {
    let text =
        serde_json::to_string_pretty(&predictions_to_json(preds)).expect("predictions serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<DetectionSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, Vec<PredictionRecord>> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    map.into_iter()
        .map(|(vid, items)| {
            let mut set = DetectionSet::new(vid.clone());
            for r in items {
                let seg = crate::timeline::Segment::from_start_end(r.start, r.end)
                    .map_err(|e| Error::Data(format!("prediction in `{vid}`: {e}")))?;
                if !(0.0..=1.0).contains(&r.score) {
                    return Err(Error::Data(format!(
                        "prediction in `{vid}` has score {}",
                        r.score
                    )));
                }
                set.push(seg, r.label, r.score);
            }
            Ok(set)
        })
        .collect()
}
