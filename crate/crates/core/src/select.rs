//! Query selection from encoder proposals.
//!
//! The adaptive selector cuts the level-1 timeline into `S` sectors and keeps
//! the `K` best-scoring proposals of every sector, pooling positions from all
//! pyramid levels by the time of their reference center. The fixed selector
//! keeps the global top-`N` and exists as the baseline it replaces.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::coord::ReferenceGrid;
use crate::error::{Error, Result};
use crate::model::EncoderOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Adaptive,
    Fixed,
}

impl std::str::FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::Config(format!("unknown select.mode `{other}`"))),
        }
    }
}

impl SelectMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub mode: SelectMode,
    /// Base sector length in level-1 snippets.
    pub t_sector: usize,
    /// Queries kept per sector.
    pub k: usize,
    /// Queries kept by the fixed selector.
    pub fixed_n: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        // 219 snippets of 8 frames at 25 fps is about 70 s
        Self {
            mode: SelectMode::Adaptive,
            t_sector: 219,
            k: 10,
            fixed_n: 40,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_sector == 0 || self.k == 0 || self.fixed_n == 0 {
            return Err(Error::Config(
                "select.t_sector, select.k and select.fixed_n must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Partition of `[0, T_1)` into sectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectorPlan {
    pub sector_len: usize,
    pub num_sectors: usize,
    /// `num_sectors + 1` increasing level-1 indices, first 0 and last `T_1`.
    pub boundaries: Vec<usize>,
}

impl SectorPlan {
    pub fn sector_lengths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// `S = max(1, floor(T_1 / T_sector))` sectors with boundaries `floor(s * T_1 / S)`.
///
/// Spreading the remainder this way keeps every sector at least `T_sector`
/// long whenever `S > 1`.
pub fn plan_sectors(t1: usize, t_sector: usize) -> SectorPlan {
    let t_sector = t_sector.max(1);
    let s = (t1 / t_sector).max(1);
    let boundaries = (0..=s).map(|i| i * t1 / s).collect();
    SectorPlan {
        sector_len: t_sector,
        num_sectors: s,
        boundaries,
    }
}

/// Where a selected query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuerySource {
    /// 0-based index within the level.
    pub t: usize,
    /// 1-based pyramid level.
    pub level: usize,
    pub sector: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub center: f64,
    pub width: f64,
    pub score: f64,
    pub source: QuerySource,
    /// Row of the position in the concatenated encoder memory.
    pub position: usize,
}

/// Selected initial proposals plus their content seeds (memory rows).
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<T: Scalar> {
    pub items: Vec<QueryItem>,
    pub content: Tensor<T>,
}

impl<T: Scalar> QuerySet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.items.iter().map(|q| q.position).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    time: f64,
    level: usize,
    t: usize,
    position: usize,
}

// descending score, then earlier center, then lower level
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.time.total_cmp(&b.time))
        .then(a.level.cmp(&b.level))
        .then(a.t.cmp(&b.t))
}

fn candidates<T: Scalar>(
    enc: &EncoderOutput<T>,
    grids: &[ReferenceGrid],
) -> Result<Vec<Candidate>> {
    if grids.len() != enc.level_lengths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reference grids for {} pyramid levels",
            grids.len(),
            enc.level_lengths.len()
        )));
    }
    let mut out = Vec::with_capacity(enc.scores.len());
    let mut position = 0;
    for (l, (grid, &len)) in grids.iter().zip(&enc.level_lengths).enumerate() {
        if grid.centers.len() != len {
            return Err(Error::InvalidArgument(format!(
                "level {} grid has {} centers, encoder has {} positions",
                l + 1,
                grid.centers.len(),
                len
            )));
        }
        for (t, &time) in grid.centers.iter().enumerate() {
            out.push(Candidate {
                score: enc.scores[position],
                time,
                level: l + 1,
                t,
                position,
            });
            position += 1;
        }
    }
    Ok(out)
}

fn build<T: Scalar>(enc: &EncoderOutput<T>, chosen: &[(Candidate, usize)]) -> QuerySet<T> {
    let dim = enc.memory.cols;
    let mut content = Tensor::zeros(chosen.len(), dim);
    let items = chosen
        .iter()
        .enumerate()
        .map(|(i, (c, sector))| {
            content
                .row_mut(i)
                .copy_from_slice(enc.memory.row(c.position));
            let seg = enc.proposals[c.position];
            QueryItem {
                center: seg.center,
                width: seg.width,
                score: c.score,
                source: QuerySource {
                    t: c.t,
                    level: c.level,
                    sector: *sector,
                },
                position: c.position,
            }
        })
        .collect();
    QuerySet { items, content }
}

/// Sector index of every candidate, by reference-center time.
fn sector_of(times_level1: &[f64], plan: &SectorPlan, time: f64) -> usize {
    // interior boundary b sits halfway between level-1 centers b-1 and b
    let mut s = 0;
    for b in &plan.boundaries[1..plan.num_sectors] {
        let edge = 0.5 * (times_level1[b - 1] + times_level1[*b]);
        if time >= edge {
            s += 1;
        } else {
            break;
        }
    }
    s
}

/// Per-sector top-`k` selection.
pub fn select_adaptive<T: Scalar>(
    enc: &EncoderOutput<T>,
    grids: &[ReferenceGrid],
    plan: &SectorPlan,
    k: usize,
) -> Result<QuerySet<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let cands = candidates(enc, grids)?;
    let t1 = grids[0].centers.len();
    if *plan.boundaries.last().unwrap_or(&0) != t1 {
        return Err(Error::InvalidArgument(format!(
            "sector plan covers {} level-1 steps, video has {t1}",
            plan.boundaries.last().unwrap_or(&0)
        )));
    }
    let mut sectors: Vec<Vec<Candidate>> = vec![Vec::new(); plan.num_sectors];
    for c in cands {
        sectors[sector_of(&grids[0].centers, plan, c.time)].push(c);
    }
    let mut chosen = Vec::with_capacity(plan.num_sectors * k);
    for (s, mut members) in sectors.into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} positions of sector {s}",
                members.len()
            )));
        }
        members.sort_by(rank);
        chosen.extend(members.into_iter().take(k).map(|c| (c, s)));
    }
    Ok(build(enc, &chosen))
}

/// Global top-`n` selection.
pub fn select_fixed_topk<T: Scalar>(
    enc: &EncoderOutput<T>,
    grids: &[ReferenceGrid],
    n: usize,
) -> Result<QuerySet<T>> {
    let mut cands = candidates(enc, grids)?;
    if n == 0 || n > cands.len() {
        return Err(Error::InvalidArgument(format!(
            "fixed top-n needs 1 <= n <= {}, got {n}",
            cands.len()
        )));
    }
    cands.sort_by(rank);
    let chosen: Vec<(Candidate, usize)> = cands.into_iter().take(n).map(|c| (c, 0)).collect();
    Ok(build(enc, &chosen))
}

/// Smallest per-sector population, the largest usable `k`.
pub fn min_sector_population(grids: &[ReferenceGrid], plan: &SectorPlan) -> usize {
    let mut counts = vec![0usize; plan.num_sectors];
    for g in grids {
        for &time in &g.centers {
            counts[sector_of(&grids[0].centers, plan, time)] += 1;
        }
    }
    counts.into_iter().min().unwrap_or(0)
}
