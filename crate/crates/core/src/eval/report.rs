use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{false_negative_buckets, mean_ap, nms, BucketRate, EvalConfig, GroundTruth, MapTable};
use crate::dataset::VideoRecord;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::scalar::Scalar;
use crate::timeline::DetectionSet;

/// Optional post-processing applied to raw detections before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PostProcess {
    /// Class-wise NMS threshold.
    pub nms: Option<f64>,
    /// Keep at most this many detections per video (after NMS).
    pub top_k: Option<usize>,
}

impl PostProcess {
    pub fn apply(&self, preds: &[DetectionSet]) -> Vec<DetectionSet> {
        preds
            .iter()
            .map(|set| {
                let mut out = match self.nms {
                    Some(t) => nms(set, t),
                    None => set.clone(),
                };
                if let Some(k) = self.top_k {
                    out.items.sort_by(|a, b| b.score.total_cmp(&a.score));
                    out.items.truncate(k);
                }
                out
            })
            .collect()
    }
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_videos: usize,
    pub num_predictions: usize,
    pub post: PostProcess,
    pub map: MapTable,
    pub false_negatives: Vec<BucketRate>,
}

impl EvalReport {
    /// Plain-text table: one AP column per threshold plus the average.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let post = match (self.post.nms, self.post.top_k) {
            (None, None) => "none".to_string(),
            (n, k) => {
                let mut parts = Vec::new();
                if let Some(n) = n {
                    parts.push(format!("nms {n}"));
                }
                if let Some(k) = k {
                    parts.push(format!("top-{k}"));
                }
                parts.join(", ")
            }
        };
        let _ = writeln!(
            s,
            "videos {}  predictions {}  post-processing {post}",
            self.num_videos, self.num_predictions
        );
        for t in &self.map.thresholds {
            let _ = write!(s, "{:>9}", format!("AP@{t}"));
        }
        let _ = writeln!(s, "{:>9}", "avg");
        for v in &self.map.per_threshold {
            let _ = write!(s, "{:>9.4}", v);
        }
        let _ = writeln!(s, "{:>9.4}", self.map.average);
        let _ = writeln!(s, "false negatives by length:");
        for b in &self.false_negatives {
            let rate = b.rate.map_or("-".to_string(), |r| format!("{r:.3}"));
            let hi =
                b.hi.map_or_else(|| "inf".to_string(), |h| format!("{h:.2}"));
            let _ = writeln!(
                s,
                "  {:<3} [{:.2}, {hi}) s  {:>4}/{:<4} {rate}",
                b.label, b.lo, b.missed, b.count
            );
        }
        s
    }
}

/// Raw, unprocessed detections of `det` on every video.
pub fn predict_all<T: Scalar>(
    det: &Detector<T>,
    videos: &[&VideoRecord],
) -> Result<Vec<DetectionSet>> {
    videos
        .iter()
        .map(|v| det.predict(&v.features.cast::<T>()))
        .collect()
}

/// Scores `raw` detections after optional post-processing.
pub fn evaluate_detections(
    raw: &[DetectionSet],
    gts: &GroundTruth,
    cfg: &EvalConfig,
    post: PostProcess,
) -> Result<(Vec<DetectionSet>, EvalReport)> {
    if gts.values().all(Vec::is_empty) {
        return Err(Error::Data("evaluation split has no ground truth".into()));
    }
    let mut post = post;
    if post.top_k.is_none() {
        post.top_k = cfg.top_n_cap;
    }
    let preds = post.apply(raw);
    let report = EvalReport {
        num_videos: preds.len(),
        num_predictions: preds.iter().map(|p| p.items.len()).sum(),
        post,
        map: mean_ap(&preds, gts, cfg),
        false_negatives: false_negative_buckets(&preds, gts, cfg)?,
    };
    Ok((preds, report))
}
