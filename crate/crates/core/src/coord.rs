//! Coordinate expressions for temporal segments.
//!
//! Two parameterizations are supported:
//!
//! * **time-aligned**: references and predictions live on the real timeline in
//!   seconds. A center offset is scaled by the current half-width and the
//!   half-width is updated additively in log space, so every decode is
//!   equivariant to time shifts and to rescaling of the reference.
//! * **normalized**: the sigmoid baseline where center and half-width are
//!   fractions of the video duration and refinement happens in logit space.
//!
//! Reference grids place one reference per pyramid position. The sampling
//! bridge [`time_to_index`] converts seconds back into fractional feature
//! indices and is the only place where that conversion is defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{logit, sigmoid, Scalar};
use crate::timeline::{Segment, VideoMeta};

/// How reference centers and widths are laid out on the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Snippet midpoints in seconds; widths are multiples of the level's snippet duration.
    UnitConsistent,
    /// The literal printed formulas (`t*f/(w*2^(l-1)) + w*2^(l-1)/2`, `alpha*f*2^(l-1)`).
    PaperLiteral,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_consistent" => Ok(Self::UnitConsistent),
            "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(Error::Config(format!("unknown coord.mode `{other}`"))),
        }
    }
}

impl GridMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::UnitConsistent => "unit_consistent",
            Self::PaperLiteral => "paper_literal",
        }
    }
}

/// Which segment parameterization the detector decodes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordExpression {
    TimeAligned,
    Normalized,
}

impl std::str::FromStr for CoordExpression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time_aligned" => Ok(Self::TimeAligned),
            "normalized" => Ok(Self::Normalized),
            other => Err(Error::Config(format!("unknown coord.expression `{other}`"))),
        }
    }
}

impl CoordExpression {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TimeAligned => "time_aligned",
            Self::Normalized => "normalized",
        }
    }
}

/// Per-level reference centers (seconds) and the shared reference half-width.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    /// 1-based pyramid level.
    pub level: usize,
    pub centers: Vec<f64>,
    pub width: f64,
    pub base_scale: f64,
    pub mode: GridMode,
}

/// Number of positions at `level` (1-based) for a level-1 length `t1`.
pub fn level_length(t1: usize, level: usize) -> usize {
    let div = 1usize << (level - 1);
    t1.div_ceil(div)
}

/// Builds the reference grid of one pyramid level.
pub fn make_reference_grid(
    meta: &VideoMeta,
    level: usize,
    num_levels: usize,
    base_scale: f64,
    mode: GridMode,
) -> Result<ReferenceGrid> {
    if level < 1 || level > num_levels {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside [1, {num_levels}]"
        )));
    }
    if !(base_scale.is_finite() && base_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base_scale must be positive, got {base_scale}"
        )));
    }
    let n = level_length(meta.num_features, level);
    let factor = (1u64 << (level - 1)) as f64;
    let stride = meta.stride as f64;
    let (centers, width) = match mode {
        GridMode::UnitConsistent => {
            let step = stride * factor / meta.fps;
            let centers = (1..=n).map(|t| (t as f64 - 0.5) * step).collect();
            (centers, base_scale * step)
        }
        GridMode::PaperLiteral => {
            let centers = (1..=n)
                .map(|t| t as f64 * meta.fps / (stride * factor) + stride * factor / 2.0)
                .collect();
            (centers, base_scale * meta.fps * factor)
        }
    };
    Ok(ReferenceGrid {
        level,
        centers,
        width,
        base_scale,
        mode,
    })
}

/// Seconds to fractional feature index at `level` (1-based).
///
/// Index `i` of a level is the snippet whose midpoint sits at
/// `(i + 0.5) * stride * 2^(level-1) / fps`.
#[inline]
pub fn time_to_index(time: f64, meta: &VideoMeta, level: usize) -> f64 {
    time * index_per_second(meta, level) - 0.5
}

/// Inverse of [`time_to_index`].
#[inline]
pub fn index_to_time(index: f64, meta: &VideoMeta, level: usize) -> f64 {
    (index + 0.5) / index_per_second(meta, level)
}

/// Derivative of [`time_to_index`] with respect to time.
#[inline]
pub fn index_per_second(meta: &VideoMeta, level: usize) -> f64 {
    meta.fps / (meta.stride as f64 * (1u64 << (level - 1)) as f64)
}

/// Network-predicted adjustment of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffsetPair<T: Scalar = f64> {
    /// Center shift in units of the current half-width.
    pub d_center: T,
    /// Additive change of the log half-width.
    pub d_logwidth: T,
}

impl<T: Scalar> OffsetPair<T> {
    pub fn new(d_center: T, d_logwidth: T) -> Result<Self> {
        if !(d_center.is_finite() && d_logwidth.is_finite()) {
            return Err(Error::InvalidArgument("offsets must be finite".into()));
        }
        Ok(Self {
            d_center,
            d_logwidth,
        })
    }
}

/// Decodes an encoder proposal from its time-aligned reference.
pub fn decode_time_aligned<T: Scalar>(
    ref_center: T,
    ref_width: T,
    off: OffsetPair<T>,
) -> Segment<T> {
    Segment {
        center: ref_center + off.d_center * ref_width,
        width: ref_width * off.d_logwidth.exp(),
    }
}

/// One decoder-layer refinement on the real timeline.
pub fn refine_time_aligned<T: Scalar>(prev: Segment<T>, off: OffsetPair<T>) -> Segment<T> {
    decode_time_aligned(prev.center, prev.width, off)
}

/// Offsets that map `reference` exactly onto `target` (inverse of the decode).
pub fn offsets_for_target<T: Scalar>(reference: Segment<T>, target: Segment<T>) -> OffsetPair<T> {
    OffsetPair {
        d_center: (target.center - reference.center) / reference.width,
        d_logwidth: target.width.ln() - reference.width.ln(),
    }
}

/// Sigmoid-normalized decode: `start = (s(c) - s(d)) * duration`, `end = (s(c) + s(d)) * duration`.
pub fn decode_normalized_baseline<T: Scalar>(
    raw_center: T,
    raw_width: T,
    duration: T,
) -> Segment<T> {
    Segment {
        center: sigmoid(raw_center) * duration,
        width: sigmoid(raw_width) * duration,
    }
}

/// Logit-space refinement of a normalized `(center, half-width)` pair.
pub fn refine_normalized_baseline<T: Scalar>(prev: (T, T), off: OffsetPair<T>) -> Result<(T, T)> {
    let inside = |v: T| v > T::zero() && v < T::one();
    if !(inside(prev.0) && inside(prev.1)) {
        return Err(Error::InvalidArgument(format!(
            "normalized coordinates must lie strictly inside (0, 1), got ({}, {})",
            prev.0, prev.1
        )));
    }
    Ok((
        sigmoid(logit(prev.0) + off.d_center),
        sigmoid(logit(prev.1) + off.d_logwidth),
    ))
}

/// Clamp applied to normalized coordinates before taking a logit inside the model.
pub const NORMALIZED_EPS: f64 = 1e-6;

/// Output and local Jacobian of one segment update in a given expression.
///
/// Inputs and outputs are seconds in both expressions; the normalized
/// expression divides by `duration` internally.
#[derive(Debug, Clone, Copy)]
pub struct SegmentUpdate<T> {
    pub center: T,
    pub width: T,
    /// d center / d prev_center
    pub dc_dpc: T,
    /// d center / d prev_width
    pub dc_dpw: T,
    /// d center / d offset_center
    pub dc_doc: T,
    /// d width / d prev_width
    pub dw_dpw: T,
    /// d width / d offset_logwidth
    pub dw_dow: T,
}

pub fn segment_update<T: Scalar>(
    expr: CoordExpression,
    prev_center: T,
    prev_width: T,
    off_center: T,
    off_logwidth: T,
    duration: T,
) -> SegmentUpdate<T> {
    match expr {
        CoordExpression::TimeAligned => {
            let growth = off_logwidth.exp();
            let width = prev_width * growth;
            SegmentUpdate {
                center: prev_center + off_center * prev_width,
                width,
                dc_dpc: T::one(),
                dc_dpw: off_center,
                dc_doc: prev_width,
                dw_dpw: growth,
                dw_dow: width,
            }
        }
        CoordExpression::Normalized => {
            let (c, dc_dp, dc_do) = normalized_axis(prev_center, off_center, duration);
            let (w, dw_dp, dw_do) = normalized_axis(prev_width, off_logwidth, duration);
            SegmentUpdate {
                center: c,
                width: w,
                dc_dpc: dc_dp,
                dc_dpw: T::zero(),
                dc_doc: dc_do,
                dw_dpw: dw_dp,
                dw_dow: dw_do,
            }
        }
    }
}

// value, d/d prev, d/d offset for `sigmoid(logit(prev / D) + off) * D`
fn normalized_axis<T: Scalar>(prev: T, off: T, duration: T) -> (T, T, T) {
    let eps = T::lit(NORMALIZED_EPS);
    let raw = prev / duration;
    let clamped = raw < eps || raw > T::one() - eps;
    let p = raw.max(eps).min(T::one() - eps);
    let s = sigmoid(logit(p) + off);
    let slope = s * (T::one() - s);
    let d_prev = if clamped {
        T::zero()
    } else {
        slope / (p * (T::one() - p))
    };
    (s * duration, d_prev, slope * duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(fps: f64, stride: usize, t: usize) -> VideoMeta {
        VideoMeta {
            video_id: "v".into(),
            fps,
            stride,
            num_features: t,
            channels: 1,
            duration_sec: t as f64 * stride as f64 / fps,
        }
    }

    #[test]
    fn grid_fixtures() {
        let g = make_reference_grid(&meta(1.0, 1, 3), 1, 1, 2.0, GridMode::UnitConsistent).unwrap();
        assert_eq!(g.centers, vec![0.5, 1.5, 2.5]);
        assert_eq!(g.width, 2.0);

        let g = make_reference_grid(&meta(1.0, 1, 3), 1, 1, 1.0, GridMode::PaperLiteral).unwrap();
        assert_eq!(g.centers[0], 1.5);
        assert_eq!(g.width, 1.0);

        let m = meta(25.0, 8, 16);
        let g1 = make_reference_grid(&m, 1, 2, 2.0, GridMode::UnitConsistent).unwrap();
        let g2 = make_reference_grid(&m, 2, 2, 2.0, GridMode::UnitConsistent).unwrap();
        let sp1 = g1.centers[1] - g1.centers[0];
        let sp2 = g2.centers[1] - g2.centers[0];
        assert!((sp2 - 2.0 * sp1).abs() < 1e-12);
        assert!((g2.width - 2.0 * g1.width).abs() < 1e-12);
        assert_eq!(g2.centers.len(), 8);
    }

    #[test]
    fn grid_errors_and_ceil_lengths() {
        let m = meta(25.0, 8, 5);
        assert!(make_reference_grid(&m, 0, 3, 2.0, GridMode::UnitConsistent).is_err());
        assert!(make_reference_grid(&m, 4, 3, 2.0, GridMode::UnitConsistent).is_err());
        assert!(make_reference_grid(&m, 1, 3, 0.0, GridMode::UnitConsistent).is_err());
        let lens: Vec<usize> = (1..=3)
            .map(|l| {
                make_reference_grid(&m, l, 3, 2.0, GridMode::UnitConsistent)
                    .unwrap()
                    .centers
                    .len()
            })
            .collect();
        assert_eq!(lens, vec![5, 3, 2]);
    }

    #[test]
    fn grid_centers_land_on_integer_indices() {
        let m = meta(25.0, 8, 20);
        for level in 1..=3 {
            let g = make_reference_grid(&m, level, 3, 2.0, GridMode::UnitConsistent).unwrap();
            for (i, c) in g.centers.iter().enumerate() {
                assert!((time_to_index(*c, &m, level) - i as f64).abs() < 1e-9);
                assert!((index_to_time(i as f64, &m, level) - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn time_aligned_fixtures() {
        let s = decode_time_aligned(10.0f64, 2.0, OffsetPair::default());
        assert_eq!((s.center, s.width), (10.0, 2.0));
        let off = OffsetPair::new(0.5, 2f64.ln()).unwrap();
        let s = decode_time_aligned(10.0, 2.0, off);
        assert!((s.center - 11.0).abs() < 1e-12 && (s.width - 4.0).abs() < 1e-12);
        let s = decode_time_aligned(100.0, 20.0, off);
        assert!((s.center - 110.0).abs() < 1e-12 && (s.width - 40.0).abs() < 1e-12);

        let prev = Segment {
            center: 5.0f64,
            width: 1.0,
        };
        assert_eq!(refine_time_aligned(prev, OffsetPair::default()), prev);
        let s = refine_time_aligned(prev, OffsetPair::new(-1.0, 0.0).unwrap());
        assert_eq!((s.center, s.width), (4.0, 1.0));
        let (b1, b2) = (0.3f64, -0.7f64);
        let s = refine_time_aligned(
            refine_time_aligned(prev, OffsetPair::new(0.2, b1).unwrap()),
            OffsetPair::new(0.0, b2).unwrap(),
        );
        assert!((s.width - (b1 + b2).exp()).abs() < 1e-12);
        assert!(OffsetPair::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn normalized_fixtures() {
        let s = decode_normalized_baseline(0.0f64, 0.0, 100.0);
        assert_eq!((s.start(), s.end()), (0.0, 100.0));
        let s = decode_normalized_baseline(0.0f64, -800.0, 100.0);
        assert!((s.start() - 50.0).abs() < 1e-9 && (s.end() - 50.0).abs() < 1e-9);
        let a = decode_normalized_baseline(0.0f64, 0.0, 100.0);
        let b = decode_normalized_baseline(0.1, 0.0, 100.0);
        // (sigmoid(0.1) - 0.5) * 100
        assert!((b.center - a.center - 2.497_918_747_894).abs() < 1e-9);

        let r = refine_normalized_baseline((0.5, 0.5), OffsetPair::default()).unwrap();
        assert_eq!(r, (0.5, 0.5));
        let r =
            refine_normalized_baseline((0.5f64, 0.5), OffsetPair::new(logit(0.7), 0.0).unwrap())
                .unwrap();
        assert!((r.0 - 0.7).abs() < 1e-12 && r.1 == 0.5);
        assert!(refine_normalized_baseline((0.0, 0.5), OffsetPair::default()).is_err());
        assert!(refine_normalized_baseline((0.5, 1.0), OffsetPair::default()).is_err());
    }

    #[test]
    fn normalized_sensitivity_scales_with_duration() {
        // d center / d raw_center at 0 equals 0.25 * duration
        for duration in [10.0f64, 100.0, 1000.0] {
            let h = 1e-6;
            let d = (decode_normalized_baseline(h, 0.0, duration).center
                - decode_normalized_baseline(-h, 0.0, duration).center)
                / (2.0 * h);
            assert!((d - 0.25f64 * duration).abs() < 1e-6 * duration);
        }
    }

    #[test]
    fn segment_update_matches_pure_functions() {
        let u = segment_update(CoordExpression::TimeAligned, 10.0f64, 2.0, 0.5, 0.2, 100.0);
        let s = decode_time_aligned(10.0, 2.0, OffsetPair::new(0.5, 0.2).unwrap());
        assert_eq!((u.center, u.width), (s.center, s.width));

        let u = segment_update(CoordExpression::Normalized, 30.0f64, 5.0, 0.5, 0.2, 100.0);
        let (c, d) =
            refine_normalized_baseline((0.3f64, 0.05), OffsetPair::new(0.5, 0.2).unwrap()).unwrap();
        assert!((u.center - c * 100.0).abs() < 1e-9 && (u.width - d * 100.0).abs() < 1e-9);
    }

    #[test]
    fn segment_update_jacobian_matches_finite_differences() {
        let h = 1e-6;
        for expr in [CoordExpression::TimeAligned, CoordExpression::Normalized] {
            let x = [30.0, 5.0, 0.3, -0.4];
            let f = |x: [f64; 4]| {
                let u = segment_update(expr, x[0], x[1], x[2], x[3], 100.0);
                (u.center, u.width)
            };
            let u = segment_update(expr, x[0], x[1], x[2], x[3], 100.0);
            let analytic_c = [u.dc_dpc, u.dc_dpw, u.dc_doc, 0.0];
            let analytic_w = [0.0, u.dw_dpw, 0.0, u.dw_dow];
            for i in 0..4 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let (cp, wp) = f(xp);
                let (cm, wm) = f(xm);
                assert!(
                    ((cp - cm) / (2.0 * h) - analytic_c[i]).abs() < 1e-6,
                    "{expr:?} c/{i}"
                );
                assert!(
                    ((wp - wm) / (2.0 * h) - analytic_w[i]).abs() < 1e-6,
                    "{expr:?} w/{i}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn inverse_consistency(rc in -500.0..500.0f64, rw in 0.01..100.0f64,
                               tc in -500.0..500.0f64, tw in 0.01..100.0f64) {
            let reference = Segment { center: rc, width: rw };
            let target = Segment { center: tc, width: tw };
            let off = offsets_for_target(reference, target);
            let back = decode_time_aligned(rc, rw, off);
            prop_assert!((back.center - tc).abs() <= 1e-9 * tc.abs().max(rw).max(1.0));
            prop_assert!((back.width - tw).abs() <= 1e-9 * tw);
        }

        #[test]
        fn widths_positive(rw in 1e-3..1e3f64, dd in -20.0..20.0f64, dc in -5.0..5.0f64) {
            let s = decode_time_aligned(0.0, rw, OffsetPair { d_center: dc, d_logwidth: dd });
            prop_assert!(s.width > 0.0);
        }

        #[test]
        fn normalized_refine_stays_in_unit_interval(c in 0.001..0.999f64, d in 0.001..0.999f64,
                                                    oc in -30.0..30.0f64, od in -30.0..30.0f64) {
            let (c2, d2) = refine_normalized_baseline((c, d), OffsetPair { d_center: oc, d_logwidth: od }).unwrap();
            prop_assert!((0.0..=1.0).contains(&c2) && (0.0..=1.0).contains(&d2));
        }
    }
}
