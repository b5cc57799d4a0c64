use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchor and size of one recorded mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub anchor: usize,
    pub size: usize,
    /// `anchor + size + H − 1`, the last row any sample of the batch predicts.
    pub last_target: usize,
}

/// Tracks which past mini-batches have fully matured.
///
/// Batch `m` is matured at anchor `t_k` when `t_m + B_m + H − 1 ≤ t_k`. Since
/// anchors are strictly increasing, so are last-target rows, and the matured
/// set is always a prefix `0..n` of the recorded batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturationLedger {
    horizon: usize,
    entries: Vec<LedgerEntry>,
    /// Size of the matured prefix seen at each recorded anchor.
    matured_counts: Vec<usize>,
}

impl MaturationLedger {
    pub fn new(horizon: usize) -> Self {
        MaturationLedger {
            horizon,
            entries: Vec::new(),
            matured_counts: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records batch `k = len()` and returns its matured set `0..n`.
    pub fn push(&mut self, anchor: usize, size: usize) -> Result<std::ops::Range<usize>> {
        if size == 0 {
            return Err(Error::InvalidPlan("mini-batch of size 0".into()));
        }
        if let Some(prev) = self.entries.last() {
            if anchor != prev.anchor + prev.size {
                return Err(Error::InvalidPlan(format!(
                    "batch {} has anchor {anchor}, expected {}",
                    self.entries.len(),
                    prev.anchor + prev.size
                )));
            }
        }
        let mut n = self.matured_counts.last().copied().unwrap_or(0);
        while n < self.entries.len() && self.entries[n].last_target <= anchor {
            n += 1;
        }
        self.entries.push(LedgerEntry {
            anchor,
            size,
            last_target: anchor + size + self.horizon - 1,
        });
        self.matured_counts.push(n);
        Ok(0..n)
    }

    /// Matured set of recorded batch `k`.
    pub fn matured(&self, k: usize) -> std::ops::Range<usize> {
        0..self.matured_counts[k]
    }

    /// `m(k)`: most recent matured batch at step `k`.
    pub fn most_recent(&self, k: usize) -> Option<usize> {
        self.matured_counts[k].checked_sub(1)
    }

    pub fn matured_counts(&self) -> &[usize] {
        &self.matured_counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_agrees() {
        let sizes = [3, 5, 2, 4, 4, 1, 6, 3, 2, 5];
        for horizon in 1..12 {
            let mut ledger = MaturationLedger::new(horizon);
            let mut anchor = 20;
            let mut plan = Vec::new();
            for &b in &sizes {
                let got = ledger.push(anchor, b).unwrap();
                plan.push((anchor, b));
                let expect: Vec<usize> = (0..plan.len() - 1)
                    .filter(|&m| plan[m].0 + plan[m].1 + horizon - 1 <= anchor)
                    .collect();
                assert_eq!(got.collect::<Vec<_>>(), expect);
                anchor += b;
            }
            assert!(ledger.matured_counts().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn inconsistent_anchor_rejected() {
        let mut ledger = MaturationLedger::new(4);
        ledger.push(10, 3).unwrap();
        assert!(matches!(ledger.push(14, 3), Err(Error::InvalidPlan(_))));
        assert!(matches!(ledger.push(13, 0), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn long_horizon_never_matures() {
        let mut ledger = MaturationLedger::new(1000);
        let mut anchor = 0;
        for _ in 0..50 {
            assert!(ledger.push(anchor, 7).unwrap().is_empty());
            anchor += 7;
        }
        assert_eq!(ledger.most_recent(49), None);
    }
}
