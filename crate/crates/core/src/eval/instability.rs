use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per epoch, per video: the query slot matched to each ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstabilityLog {
    pub epochs: Vec<BTreeMap<String, Vec<Option<usize>>>>,
}

impl InstabilityLog {
    pub fn push_epoch(&mut self, assignments: BTreeMap<String, Vec<Option<usize>>>) {
        self.epochs.push(assignments);
    }

    /// IS for every epoch that has a predecessor.
    pub fn series(&self) -> Result<Vec<f64>> {
        (1..self.epochs.len())
            .map(|i| instability(self, i))
            .collect()
    }
}

/// Fraction of ground truths whose matched slot differs between epochs
/// `epoch - 1` and `epoch` (0-based indices into the log).
pub fn instability(log: &InstabilityLog, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch >= log.epochs.len() {
        return Err(Error::InvalidArgument(format!(
            "instability needs epochs {} and {epoch}, log has {}",
            epoch.wrapping_sub(1) as isize,
            log.epochs.len()
        )));
    }
    let (prev, cur) = (&log.epochs[epoch - 1], &log.epochs[epoch]);
    if prev.len() != cur.len() || prev.keys().zip(cur.keys()).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument(format!(
            "epochs {} and {epoch} cover different videos",
            epoch - 1
        )));
    }
    let mut total = 0usize;
    let mut changed = 0usize;
    for (vid, a) in prev {
        let b = &cur[vid];
        if a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "video `{vid}` changed its ground-truth count"
            )));
        }
        total += a.len();
        changed += a.iter().zip(b).filter(|(x, y)| x != y).count();
    }
    Ok(if total == 0 {
        0.0
    } else {
        changed as f64 / total as f64
    })
}
