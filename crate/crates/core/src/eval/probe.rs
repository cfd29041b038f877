use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean_ap, EvalConfig, GroundTruth};
use crate::coord::{segment_update, CoordExpression};
use crate::error::{Error, Result};
use crate::model::{detections_from, Detector};
use crate::scalar::Scalar;
use crate::tape::Graph;
use crate::tensor::Tensor;
use crate::timeline::{DetectionSet, FeatureSequence, VideoMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Center,
    Width,
}

impl NoiseTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Center => "center",
            Self::Width => "width",
        }
    }
}

/// Inputs of the final decoder refinement for one video, so perturbed
/// predictions can be recomputed without rerunning the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCache<T: Scalar> {
    pub meta: VideoMeta,
    pub expression: CoordExpression,
    pub prev: Tensor<T>,
    pub offsets: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ProbeCache<T> {
    pub fn build(det: &Detector<T>, video: &FeatureSequence<T>) -> Result<Self> {
        let mut g = Graph::new(&det.params);
        let fv = det.forward(&mut g, video)?;
        let last = fv.layers.last().expect("at least one decoder layer");
        Ok(Self {
            meta: video.meta.clone(),
            expression: det.cfg.coord.expression,
            prev: g.value(last.prev).clone(),
            offsets: g.value(last.offsets).clone(),
            logits: g.value(last.logits).clone(),
        })
    }

    /// Detections with `noise[i]` added to the chosen offset of query `i`
    /// before the final update (pre-sigmoid in the normalized expression).
    pub fn detections(
        &self,
        noise: &[f64],
        target: NoiseTarget,
        cap: Option<usize>,
    ) -> DetectionSet {
        let n = self.prev.rows;
        let duration = T::lit(self.meta.duration_sec);
        let mut segs = Tensor::zeros(n, 2);
        for r in 0..n {
            let (mut oc, mut ow) = (self.offsets.get(r, 0), self.offsets.get(r, 1));
            let eps = T::lit(noise.get(r).copied().unwrap_or(0.0));
            match target {
                NoiseTarget::Center => oc += eps,
                NoiseTarget::Width => ow += eps,
            }
            let u = segment_update(
                self.expression,
                self.prev.get(r, 0),
                self.prev.get(r, 1),
                oc,
                ow,
                duration,
            );
            segs.data[2 * r] = u.center;
            segs.data[2 * r + 1] = u.width;
        }
        detections_from(&self.meta, &segs, &self.logits, cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub noise_alpha: f64,
    pub target: NoiseTarget,
    pub clean: f64,
    /// mAP@AVG of every trial.
    pub perturbed: Vec<f64>,
    /// Mean of `perturbed - clean`.
    pub delta: f64,
}

/// Mean mAP@AVG change when each prediction's offset receives
/// `U(-noise_alpha, noise_alpha)` noise, over `trials` independent draws.
pub fn noise_probe<T: Scalar>(
    caches: &[ProbeCache<T>],
    gts: &GroundTruth,
    cfg: &EvalConfig,
    noise_alpha: f64,
    target: NoiseTarget,
    trials: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if !(noise_alpha.is_finite() && noise_alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_alpha must be >= 0, got {noise_alpha}"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "noise probe needs at least one trial".into(),
        ));
    }
    let run = |noise: &dyn Fn(usize) -> Vec<f64>| {
        let preds: Vec<DetectionSet> = caches
            .iter()
            .enumerate()
            .map(|(i, c)| c.detections(&noise(i), target, cfg.top_n_cap))
            .collect();
        mean_ap(&preds, gts, cfg).average
    };
    let clean = run(&|i| vec![0.0; caches[i].prev.rows]);
    let mut perturbed = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let draws: Vec<Vec<f64>> = caches
            .iter()
            .map(|c| {
                (0..c.prev.rows)
                    .map(|_| {
                        if noise_alpha > 0.0 {
                            rng.random_range(-noise_alpha..noise_alpha)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        perturbed.push(run(&|i| draws[i].clone()));
    }
    let delta = perturbed.iter().map(|p| p - clean).sum::<f64>() / trials as f64;
    Ok(ProbeResult {
        noise_alpha,
        target,
        clean,
        perturbed,
        delta,
    })
}
