//! Deterministic training driver.
//!
//! Each step runs complete videos (no windows, no crops) through the model,
//! one graph per video, averages the gradients over the batch, clips them
//! and applies AdamW. Batch order is a pure function of `(seed, epoch)` and
//! gradients are accumulated in a fixed order, so a run is reproducible
//! bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::{write_json, Dataset, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, EvalConfig, InstabilityLog, MapTable};
use crate::loss::{total_loss, LossTerms, LossWeights, StagePrediction};
use crate::model::Detector;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tape::{Graph, ParamGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs (0 = never);
    /// the final epoch is always evaluated when enabled.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Epoch (1-based) from which the learning rate is multiplied by
    /// `lr_drop_factor`; 0 keeps it constant.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            grad_clip_norm: 0.1,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            checkpoint_every: 10,
            lr_drop_epoch: 24,
            lr_drop_factor: 0.1,
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!(
                "train.grad_clip_norm must be non-negative, got {}",
                self.grad_clip_norm
            ));
        }
        if self.checkpoint_every < 1 {
            return bad("train.checkpoint_every must be at least 1".into());
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad(format!(
                "train.lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            ));
        }
        self.loss.validate()?;
        self.eval.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_drop_epoch > 0 && epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Per-epoch training summary; loss terms are means over videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub decoder: LossTerms,
    pub encoder: LossTerms,
    /// Fraction of ground truths whose final-layer match changed since the
    /// previous epoch.
    pub instability: Option<f64>,
    /// Mean pre-clip gradient norm over steps.
    pub grad_norm: f64,
    pub lr: f64,
    pub eval: Option<MapTable>,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub matches: InstabilityLog,
}

/// Groups videos of similar length into batches. Shuffles, sorts pools of
/// `8 * batch_size` by length, cuts them into batches and shuffles the batch
/// order. Depends only on `(seed, epoch)` and the lengths.
pub fn batch_order(
    lengths: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut rng);
    let pool = 8 * batch_size.max(1);
    let mut batches = Vec::with_capacity(lengths.len().div_ceil(batch_size.max(1)));
    for chunk in idx.chunks(pool) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| (lengths[i], i));
        batches.extend(chunk.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Outcome of one video's forward and backward pass.
pub struct VideoStep<T: Scalar> {
    pub grads: ParamGrads<T>,
    pub loss: f64,
    pub decoder: LossTerms,
    pub encoder: LossTerms,
    /// Final-layer matched query slot per ground truth.
    pub slots: Vec<Option<usize>>,
}

/// Loss and parameter gradients for one video.
pub fn video_step<T: Scalar>(
    det: &Detector<T>,
    video: &VideoRecord,
    w: &LossWeights,
) -> Result<VideoStep<T>> {
    let features = video.features.cast::<T>();
    let mut g = Graph::new(&det.params);
    let fv = det.forward(&mut g, &features)?;
    let stages: Vec<StagePrediction<'_, T>> = fv
        .layers
        .iter()
        .map(|l| StagePrediction {
            segments: g.value(l.segments),
            logits: g.value(l.logits),
        })
        .collect();
    let enc = StagePrediction {
        segments: g.value(fv.enc_segments),
        logits: g.value(fv.enc_logits),
    };
    let out = total_loss(&stages, Some(enc), &video.instances, w)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            video_id: video.id().to_string(),
        });
    }
    let mut seeds = Vec::with_capacity(2 * fv.layers.len() + 2);
    for (l, grad) in fv.layers.iter().zip(out.layer_grads) {
        seeds.push((l.segments, grad.segments));
        seeds.push((l.logits, grad.logits));
    }
    if let Some(grad) = out.encoder_grad {
        seeds.push((fv.enc_segments, grad.segments));
        seeds.push((fv.enc_logits, grad.logits));
    }
    let grads = g.backward(seeds);
    let last = out
        .layer_matches
        .last()
        .and_then(|m| m.as_ref())
        .expect("final layer is always matched");
    let slots = last
        .query_of_gt(video.instances.len())
        .into_iter()
        .map(|q| q.map(|q| fv.queries.items[q].position))
        .collect();
    Ok(VideoStep {
        grads,
        loss: out.breakdown.total,
        decoder: out.breakdown.decoder,
        encoder: out.breakdown.encoder,
        slots,
    })
}

/// Mean average precision of `det` on one split, without post-processing.
pub fn evaluate_split<T: Scalar>(
    det: &Detector<T>,
    data: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MapTable> {
    let preds = data
        .split(split)
        .into_iter()
        .map(|v| det.predict_capped(&v.features.cast::<T>(), cfg.top_n_cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_ap(&preds, &data.ground_truth(split), cfg))
}

pub struct Trainer<T: Scalar> {
    pub det: Detector<T>,
    pub optimizer: AdamW<T>,
    pub state: TrainState,
    pub cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(det: Detector<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = AdamW::new(cfg.adamw(), &det.params);
        Ok(Self {
            det,
            optimizer,
            state: TrainState::default(),
            cfg,
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(ck: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let det = Detector::from_checkpoint(&ck)?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let state = ck
            .train_state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        Ok(Self {
            det,
            optimizer,
            state,
            cfg,
        })
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    /// Runs one epoch over the training split.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<&EpochRecord> {
        let train = data.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("dataset has no training videos".into()));
        }
        let epoch = self.state.epoch + 1;
        let lr = self.cfg.lr_at(epoch);
        let lengths: Vec<usize> = train.iter().map(|v| v.meta().num_features).collect();
        let mut dec = LossTerms::default();
        let mut enc = LossTerms::default();
        let mut loss = 0.0;
        let mut norms = 0.0;
        let mut steps = 0usize;
        let mut slots = BTreeMap::new();
        for batch in batch_order(&lengths, self.cfg.batch_size, self.cfg.seed, epoch) {
            let mut acc = ParamGrads::new(self.det.params.len());
            for &i in &batch {
                let step = video_step(&self.det, train[i], &self.cfg.loss)?;
                acc.accumulate(&step.grads);
                loss += step.loss;
                dec.add(&step.decoder);
                enc.add(&step.encoder);
                slots.insert(train[i].id().to_string(), step.slots);
            }
            acc.scale(T::lit(1.0 / batch.len() as f64));
            norms += clip_global_norm(&mut acc, self.cfg.grad_clip_norm);
            self.optimizer.update(&mut self.det.params, &acc, lr);
            steps += 1;
        }
        let n = train.len() as f64;
        self.state.matches.push_epoch(slots);
        let instability = match self.state.matches.epochs.len() {
            0 | 1 => None,
            k => Some(crate::eval::instability(&self.state.matches, k - 1)?),
        };
        let do_eval = self.cfg.eval_every > 0
            && (epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs);
        let eval = if do_eval && !data.split(Split::Val).is_empty() {
            Some(evaluate_split(&self.det, data, Split::Val, &self.cfg.eval)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: loss / n,
            decoder: dec.scaled(1.0 / n),
            encoder: enc.scaled(1.0 / n),
            instability,
            grad_norm: norms / steps as f64,
            lr,
            eval,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} grad {:.3} IS {}",
            record.loss,
            record.grad_norm,
            record.instability.map_or("-".into(), |v| format!("{v:.3}"))
        );
        self.state.history.push(record);
        self.state.epoch = epoch;
        if let Some(dir) = self.cfg.checkpoint_dir.clone() {
            if epoch % self.cfg.checkpoint_every == 0 || epoch == self.cfg.epochs {
                self.save(&dir)?;
            }
        }
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Trains until `cfg.epochs` epochs have completed.
    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// Writes `epoch_<n>.ckpt` and `history.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("epoch_{}.ckpt", self.state.epoch));
        save_checkpoint(&path, &self.det, Some(&self.optimizer), Some(&self.state))?;
        write_json(&dir.join("history.json"), &self.state.history)?;
        Ok(path)
    }
}

/// Trains `det` on the training split and returns it with the run state.
pub fn train<T: Scalar>(
    det: Detector<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Detector<T>, TrainState)> {
    let mut t = Trainer::new(det, cfg.clone())?;
    t.run(data)?;
    Ok((t.det, t.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::model::tests::tiny_config;
    use crate::model::ModelConfig;
    use crate::synth::{generate, GenConfig};
    use proptest::prelude::*;

    fn data() -> Dataset {
        generate(&GenConfig {
            num_train: 5,
            num_val: 2,
            min_sec: 8.0,
            max_sec: 20.0,
            channels: 3,
            num_classes: 2,
            class_signature_dim: 3,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn model() -> ModelConfig {
        tiny_config()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { epochs: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let d = data();
        let det = Detector::<f64>::new(model()).unwrap();
        let before = det.params.clone();
        let mut t = Trainer::new(
            det,
            TrainConfig {
                epochs: 1,
                weight_decay: 0.5,
                ..cfg()
            },
        )
        .unwrap();
        t.cfg.learning_rate = 0.0;
        t.run(&d).unwrap();
        assert_eq!(t.det.params, before);
        assert_eq!(t.history().len(), 1);
        assert!(t.history()[0].loss > 0.0);
    }

    #[test]
    fn runs_are_reproducible_and_learn() {
        let d = data();
        let c = TrainConfig {
            epochs: 3,
            eval_every: 3,
            ..cfg()
        };
        let (a, sa) = train(Detector::<f64>::new(model()).unwrap(), &d, &c).unwrap();
        let (b, sb) = train(Detector::<f64>::new(model()).unwrap(), &d, &c).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.params, b.params);
        assert_eq!(sa.matches.epochs.len(), 3);
        assert!(sa.history[0].instability.is_none());
        assert!(sa.history[1].instability.is_some());
        assert!(sa.history[2].eval.is_some());
        assert!(sa.history[2].loss < sa.history[0].loss);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data();
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            epochs: 3,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: 1,
            ..cfg()
        };
        let mut full = Trainer::new(Detector::<f64>::new(model()).unwrap(), c.clone()).unwrap();
        full.run(&d).unwrap();
        assert!(dir.path().join("history.json").exists());

        let ck = load_checkpoint::<f64>(&dir.path().join("epoch_2.ckpt")).unwrap();
        let mut resumed = Trainer::resume(
            ck,
            TrainConfig {
                checkpoint_dir: None,
                ..c
            },
        )
        .unwrap();
        assert_eq!(resumed.state.epoch, 2);
        let rec = resumed.run_epoch(&d).unwrap().clone();
        assert!((rec.loss - full.history()[2].loss).abs() <= 1e-6);
        assert_eq!(resumed.det.params, full.det.params);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let mut d = data();
        d.videos.retain(|v| v.split == Split::Val);
        let mut t = Trainer::new(Detector::<f64>::new(model()).unwrap(), cfg()).unwrap();
        assert!(matches!(t.run_epoch(&d), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn batches_partition_and_are_deterministic(
            lengths in proptest::collection::vec(1usize..500, 1..60),
            batch in 1usize..7,
            seed in 0u64..50,
            epoch in 1usize..5,
        ) {
            let a = batch_order(&lengths, batch, seed, epoch);
            prop_assert_eq!(&a, &batch_order(&lengths, batch, seed, epoch));
            let mut all: Vec<usize> = a.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
            prop_assert!(a.iter().all(|b| !b.is_empty() && b.len() <= batch));
            for b in &a {
                prop_assert!(b.windows(2).all(|w| lengths[w[0]] <= lengths[w[1]]));
            }
        }
    }
}
