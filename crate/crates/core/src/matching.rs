//! Minimum-cost one-to-one assignment (Hungarian method).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of matching queries to ground truths.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, ground truth)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left to the background.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Query matched to each ground truth, if any.
    pub fn query_of_gt(&self, num_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_gt];
        for &(q, g) in &self.pairs {
            out[g] = Some(q);
        }
        out
    }
}

/// Row-major cost matrix of `rows` queries by `cols` ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                name: "cost matrix".into(),
                expected: format!("{rows} x {cols} = {} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Assignment minimizing the summed cost with `min(rows, cols)` pairs.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    if let Some(v) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite matching cost {v}"
        )));
    }
    let (nq, ng) = (cost.rows, cost.cols);
    if nq == 0 || ng == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched: (0..nq).collect(),
        });
    }
    // the solver wants no more rows than columns
    let mut pairs = if ng <= nq {
        solve(ng, nq, |g, q| cost.get(q, g))
            .into_iter()
            .map(|(g, q)| (q, g))
            .collect::<Vec<_>>()
    } else {
        solve(nq, ng, |q, g| cost.get(q, g))
    };
    pairs.sort_unstable();
    let mut taken = vec![false; nq];
    for &(q, _) in &pairs {
        taken[q] = true;
    }
    let unmatched = (0..nq).filter(|q| !taken[*q]).collect();
    Ok(MatchResult { pairs, unmatched })
}

/// Shortest augmenting path formulation with potentials; `n <= m`.
/// Returns `(row, col)` for every row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}
