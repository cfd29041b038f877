//! Deterministic synthetic videos with strongly varying lengths.
//!
//! Each class owns a fixed random signature over the first
//! `class_signature_dim` channels. An instance adds its class signature to
//! the snippets it covers, shaped by a triangular envelope that peaks at the
//! instance center, on top of i.i.d. Gaussian background noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::timeline::{ActionInstance, FeatureSequence, VideoMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub min_sec: f64,
    pub max_sec: f64,
    pub fps: f64,
    pub stride: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub instances_per_minute: f64,
    pub class_signature_dim: usize,
    pub noise_std: f64,
    pub min_gap_sec: f64,
    /// Shortest instance in seconds.
    pub min_instance_sec: f64,
    /// Longest instance as a fraction of the video duration.
    pub max_instance_frac: f64,
    /// Envelope value at the instance boundaries; the peak is 1.
    pub envelope_floor: f64,
    /// Peak amplitude multiplier of the class signature.
    pub signal_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_train: 200,
            num_val: 50,
            min_sec: 30.0,
            max_sec: 1200.0,
            fps: 25.0,
            stride: 8,
            channels: 32,
            num_classes: 5,
            instances_per_minute: 2.0,
            class_signature_dim: 16,
            noise_std: 0.5,
            min_gap_sec: 1.0,
            min_instance_sec: 0.5,
            max_instance_frac: 0.15,
            envelope_floor: 0.25,
            signal_scale: 1.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_sec > 0.0 && self.min_sec < self.max_sec && self.max_sec.is_finite()) {
            return bad(format!(
                "length law needs 0 < data.min_sec < data.max_sec, got [{}, {}]",
                self.min_sec, self.max_sec
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.stride == 0 {
            return bad("data.fps and data.stride must be positive".into());
        }
        if self.channels == 0 || self.num_classes == 0 || self.class_signature_dim == 0 {
            return bad(
                "data.channels, data.num_classes and data.class_signature_dim must be >= 1".into(),
            );
        }
        if self.class_signature_dim > self.channels {
            return bad(format!(
                "data.class_signature_dim {} exceeds data.channels {}",
                self.class_signature_dim, self.channels
            ));
        }
        if self.num_train + self.num_val == 0 {
            return bad("at least one video must be generated".into());
        }
        for (name, v) in [
            ("data.instances_per_minute", self.instances_per_minute),
            ("data.noise_std", self.noise_std),
            ("data.min_gap_sec", self.min_gap_sec),
            ("data.signal_scale", self.signal_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.min_instance_sec > 0.0)
            || !(self.max_instance_frac > 0.0 && self.max_instance_frac <= 1.0)
        {
            return bad(
                "data.min_instance_sec must be > 0 and data.max_instance_frac in (0, 1]".into(),
            );
        }
        if self.min_instance_sec >= self.max_instance_frac * self.min_sec {
            return bad(format!(
                "shortest video ({} s) cannot hold an instance of {} s",
                self.min_sec, self.min_instance_sec
            ));
        }
        if !(0.0..=1.0).contains(&self.envelope_floor) {
            return bad(format!(
                "data.envelope_floor must lie in [0, 1], got {}",
                self.envelope_floor
            ));
        }
        Ok(())
    }

    pub fn snippet_sec(&self) -> f64 {
        self.stride as f64 / self.fps
    }
}

/// Seed of video `index`, independent of generation order.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"timedet-video");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// One signature per class, drawn from the dataset seed.
pub fn class_signatures(cfg: &GenConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.class_signature_dim)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect()
        })
        .collect()
}

/// Places instances left to right with random slack between them.
/// Drops instances (longest first) while they cannot fit.
fn place(
    rng: &mut ChaCha8Rng,
    duration: f64,
    mut lengths: Vec<f64>,
    gap: f64,
    video: &str,
) -> Vec<(f64, f64)> {
    loop {
        let n = lengths.len();
        let need: f64 = lengths.iter().sum::<f64>() + gap * n.saturating_sub(1) as f64;
        if need <= duration || n <= 1 {
            break;
        }
        let (longest, _) = lengths
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        log::debug!("video `{video}`: dropping an instance that does not fit ({n} requested)");
        lengths.remove(longest);
    }
    let n = lengths.len();
    let used: f64 = lengths.iter().sum::<f64>() + gap * n.saturating_sub(1) as f64;
    let slack = (duration - used).max(0.0);
    let mut cuts: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..=1.0) * slack)
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0.0;
    for (i, len) in lengths.iter().enumerate() {
        let start = (cuts[i] + cursor).min(duration - len);
        out.push((start, start + len));
        cursor += len + gap;
    }
    out
}

fn generate_video(
    cfg: &GenConfig,
    signatures: &[Vec<f32>],
    index: usize,
    split: Split,
) -> Result<VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, index));
    let id = format!("video_{index:04}");
    let duration = log_uniform(&mut rng, cfg.min_sec, cfg.max_sec);
    let snippet = cfg.snippet_sec();
    let num_features = ((duration / snippet).floor() as usize).max(1);

    let mean = duration * cfg.instances_per_minute / 60.0;
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::Config(format!("instance rate: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    }
    .max(1);
    let max_len = cfg.max_instance_frac * duration;
    let lengths: Vec<f64> = (0..count)
        .map(|_| log_uniform(&mut rng, cfg.min_instance_sec, max_len))
        .collect();
    let mut spans = place(&mut rng, duration, lengths, cfg.min_gap_sec, &id);
    // labels are drawn after placement so dropping does not shift them
    let mut instances: Vec<ActionInstance> = spans
        .drain(..)
        .map(|(s, e)| {
            ActionInstance::new(
                s.max(0.0),
                e.min(duration),
                rng.random_range(0..cfg.num_classes),
            )
        })
        .collect::<Result<_>>()?;
    instances.sort_by(|a, b| a.start.total_cmp(&b.start));

    let normal = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let c = cfg.channels;
    let mut values: Vec<f32> = (0..num_features * c)
        .map(|_| {
            if cfg.noise_std > 0.0 {
                normal.sample(&mut rng) as f32
            } else {
                0.0
            }
        })
        .collect();
    for inst in &instances {
        let sig = &signatures[inst.label];
        let center = 0.5 * (inst.start + inst.end);
        let half = 0.5 * (inst.end - inst.start);
        let first = (inst.start / snippet).floor() as usize;
        let last = ((inst.end / snippet).ceil() as usize).min(num_features);
        for t in first..last {
            let (s0, s1) = (t as f64 * snippet, (t + 1) as f64 * snippet);
            let (o0, o1) = (s0.max(inst.start), s1.min(inst.end));
            if o1 <= o0 {
                continue;
            }
            let mid = 0.5 * (o0 + o1);
            let tri = 1.0 - (mid - center).abs() / half;
            let env = cfg.envelope_floor + (1.0 - cfg.envelope_floor) * tri.max(0.0);
            let amp = (cfg.signal_scale * env * (o1 - o0) / snippet) as f32;
            let row = &mut values[t * c..t * c + sig.len()];
            for (v, s) in row.iter_mut().zip(sig) {
                *v += amp * s;
            }
        }
    }
    let meta = VideoMeta {
        video_id: id,
        fps: cfg.fps,
        stride: cfg.stride,
        num_features,
        channels: c,
        duration_sec: duration,
    };
    Ok(VideoRecord {
        features: FeatureSequence::new(meta, values)?,
        instances,
        split,
    })
}

/// Generates `num_train + num_val` videos; ids are `video_0000`, ... with
/// the training videos first.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let signatures = class_signatures(cfg);
    let videos = (0..cfg.num_train + cfg.num_val)
        .map(|i| {
            let split = if i < cfg.num_train {
                Split::Train
            } else {
                Split::Val
            };
            generate_video(cfg, &signatures, i, split)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        videos,
        labels: (0..cfg.num_classes).map(|k| format!("class_{k}")).collect(),
    })
}

/// Shuffled copy of `0..n` for reproducible subsets.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
