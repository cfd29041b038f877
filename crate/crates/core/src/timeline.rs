//! Videos, segments, annotations and feature containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-video timeline facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// Frames per second of the source video.
    pub fps: f64,
    /// Frames advanced between consecutive feature snippets.
    pub stride: usize,
    /// Number of snippets in the feature sequence.
    pub num_features: usize,
    pub channels: usize,
    pub duration_sec: f64,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Data(format!(
                "video `{}`: fps must be > 0",
                self.video_id
            )));
        }
        if self.stride == 0 || self.num_features == 0 || self.channels == 0 {
            return Err(Error::Data(format!(
                "video `{}`: stride, num_features and channels must be positive",
                self.video_id
            )));
        }
        let covered = (self.num_features - 1) as f64 * self.snippet_sec();
        if !(self.duration_sec.is_finite() && self.duration_sec > 0.0)
            || self.duration_sec + 1e-9 < covered
        {
            return Err(Error::Data(format!(
                "video `{}`: duration {} s shorter than feature span {} s",
                self.video_id, self.duration_sec, covered
            )));
        }
        Ok(())
    }

    /// Seconds covered by one level-1 snippet (`stride / fps`).
    pub fn snippet_sec(&self) -> f64 {
        self.stride as f64 / self.fps
    }
}

/// An interval on the real video timeline, stored as center and half-width.
///
/// `width` is the half-length: `start = center - width`, `end = center + width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment<T: Scalar = f64> {
    pub center: T,
    pub width: T,
}

impl<T: Scalar> Segment<T> {
    pub fn new(center: T, width: T) -> Result<Self> {
        if !(center.is_finite() && width.is_finite() && width > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "segment needs finite center and positive half-width, got ({center}, {width})"
            )));
        }
        Ok(Self { center, width })
    }

    pub fn from_start_end(start: T, end: T) -> Result<Self> {
        let two = T::lit(2.0);
        Self::new((start + end) / two, (end - start) / two)
    }

    pub fn start(&self) -> T {
        self.center - self.width
    }

    pub fn end(&self) -> T {
        self.center + self.width
    }

    pub fn length(&self) -> T {
        self.width + self.width
    }

    pub fn cast<U: Scalar>(&self) -> Segment<U> {
        Segment {
            center: U::from_f64_lossy(self.center.to_f64_lossy()),
            width: U::from_f64_lossy(self.width.to_f64_lossy()),
        }
    }
}

/// Temporal IoU of two segments; zero when disjoint.
pub fn segment_iou<T: Scalar>(a: &Segment<T>, b: &Segment<T>) -> T {
    interval_iou(a.start(), a.end(), b.start(), b.end())
}

/// Temporal IoU of `[s1, e1]` and `[s2, e2]`.
pub fn interval_iou<T: Scalar>(s1: T, e1: T, s2: T, e2: T) -> T {
    let inter = (e1.min(e2) - s1.max(s2)).max(T::zero());
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Shortest interval length produced by [`clip_to_video`].
pub const MIN_CLIPPED_LENGTH: f64 = 1e-4;

/// Clamps a segment to `[0, duration]`, keeping at least [`MIN_CLIPPED_LENGTH`].
pub fn clip_to_video<T: Scalar>(seg: &Segment<T>, meta: &VideoMeta) -> Segment<T> {
    let dur = T::from_f64_lossy(meta.duration_sec);
    let min_len = T::lit(MIN_CLIPPED_LENGTH).min(dur);
    let zero = T::zero();
    let mut start = seg.start().max(zero).min(dur);
    let mut end = seg.end().max(zero).min(dur);
    if end - start < min_len {
        let mid = (start + end) / T::lit(2.0);
        start = mid - min_len / T::lit(2.0);
        end = mid + min_len / T::lit(2.0);
        if start < zero {
            start = zero;
            end = min_len;
        } else if end > dur {
            end = dur;
            start = dur - min_len;
        }
    }
    Segment {
        center: (start + end) / T::lit(2.0),
        width: (end - start) / T::lit(2.0),
    }
}

/// One annotated action: `[start, end)` in seconds and a class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && 0.0 <= start && start < end) {
            return Err(Error::InvalidArgument(format!(
                "action instance needs 0 <= start < end, got [{start}, {end}]"
            )));
        }
        Ok(Self { start, end, label })
    }

    pub fn segment(&self) -> Segment {
        Segment {
            center: 0.5 * (self.start + self.end),
            width: 0.5 * (self.end - self.start),
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn check_within(&self, meta: &VideoMeta) -> Result<()> {
        if self.end > meta.duration_sec + 1e-9 {
            return Err(Error::Data(format!(
                "video `{}`: instance [{}, {}] ends after duration {}",
                meta.video_id, self.start, self.end, meta.duration_sec
            )));
        }
        Ok(())
    }
}

/// Snippet features of one video, row-major `num_features x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T: Scalar = f32> {
    pub meta: VideoMeta,
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(meta: VideoMeta, values: Vec<T>) -> Result<Self> {
        meta.validate()?;
        let expected = meta.num_features * meta.channels;
        if values.len() != expected {
            return Err(Error::Shape {
                name: format!("features of `{}`", meta.video_id),
                expected: format!("{} x {}", meta.num_features, meta.channels),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "video `{}`: non-finite feature at snippet {}",
                meta.video_id,
                i / meta.channels
            )));
        }
        Ok(Self { meta, values })
    }

    pub fn row(&self, t: usize) -> &[T] {
        let c = self.meta.channels;
        &self.values[t * c..(t + 1) * c]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            meta: self.meta.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: Segment,
    pub label: usize,
    pub score: f64,
}

/// Scored, classified segments for one video.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub video_id: String,
    pub items: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, segment: Segment, label: usize, score: f64) {
        debug_assert!((0.0..=1.0).contains(&score));
        self.items.push(Detection {
            segment,
            label,
            score,
        });
    }
}
