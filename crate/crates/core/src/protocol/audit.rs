//! Checks whether adapter updates consume targets that later predictions
//! still have to forecast.

use serde::{Deserialize, Serialize};

use super::ledger::MaturationLedger;
use crate::data::target_span;
use crate::error::{Error, Result};

/// An update supervised by the targets of `source`, applied before the
/// predictions of batch `applied_before` are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledUpdate {
    pub source: usize,
    pub applied_before: usize,
}

/// Samples of `later_batch` whose prediction span intersects the supervision
/// span of the update sourced from `source`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub source: usize,
    pub applied_before: usize,
    pub later_batch: usize,
    /// 1-based sample positions with a nonempty intersection.
    pub samples: Vec<usize>,
    /// Inclusive rows shared with at least one of those samples.
    pub first_row: usize,
    pub last_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub horizon: usize,
    pub batches: usize,
    pub updates: usize,
    pub overlaps: Vec<OverlapRecord>,
    /// Number of `(update, later sample)` pairs that overlap.
    pub violations: usize,
    /// For each consecutive pair `(k, k+1)`: does `H ≥ B_k + B_{k+1}` hold?
    pub sufficient_condition: Vec<bool>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations == 0
    }

    pub fn sufficient_condition_count(&self) -> usize {
        self.sufficient_condition.iter().filter(|b| **b).count()
    }
}

fn validate_plan(plan: &[(usize, usize)], horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidPlan("horizon must be at least 1".into()));
    }
    for (k, &(anchor, size)) in plan.iter().enumerate() {
        if size == 0 {
            return Err(Error::InvalidPlan(format!("batch {k} has size 0")));
        }
        if k > 0 {
            let (pa, ps) = plan[k - 1];
            if anchor != pa + ps {
                return Err(Error::InvalidPlan(format!(
                    "batch {k} has anchor {anchor}, expected {}",
                    pa + ps
                )));
            }
        }
    }
    Ok(())
}

/// Update after every batch using that batch's own targets.
pub fn streaming_schedule(plan: &[(usize, usize)]) -> Vec<ScheduledUpdate> {
    (1..plan.len())
        .map(|k| ScheduledUpdate {
            source: k - 1,
            applied_before: k,
        })
        .collect()
}

/// Update before every batch using the most recent matured batch, if any.
pub fn matured_schedule(plan: &[(usize, usize)], horizon: usize) -> Result<Vec<ScheduledUpdate>> {
    validate_plan(plan, horizon)?;
    let mut ledger = MaturationLedger::new(horizon);
    let mut out = Vec::new();
    for (k, &(anchor, size)) in plan.iter().enumerate() {
        ledger.push(anchor, size)?;
        if let Some(m) = ledger.most_recent(k) {
            out.push(ScheduledUpdate {
                source: m,
                applied_before: k,
            });
        }
    }
    Ok(out)
}

/// Intersects every update's supervision span `[t_m+1, t_m+H+B_m−1]` with the
/// prediction span `[t_k'+j, t_k'+j+H−1]` of every sample of every batch
/// `k' ≥ applied_before`.
pub fn audit_update_schedule(
    plan: &[(usize, usize)],
    horizon: usize,
    schedule: &[ScheduledUpdate],
) -> Result<LeakageReport> {
    validate_plan(plan, horizon)?;
    let mut overlaps = Vec::new();
    let mut violations = 0;
    for upd in schedule {
        if upd.source >= plan.len() || upd.applied_before > plan.len() {
            return Err(Error::InvalidPlan(format!("update {upd:?} refers past the plan")));
        }
        let (src_anchor, src_size) = plan[upd.source];
        let (sup_first, sup_last) = target_span(src_anchor, src_size, horizon);
        for (later, &(anchor, size)) in plan.iter().enumerate().skip(upd.applied_before) {
            if anchor + 1 > sup_last {
                break;
            }
            let mut samples = Vec::new();
            let (mut lo, mut hi) = (usize::MAX, 0);
            for j in 1..=size {
                let (p_first, p_last) = (anchor + j, anchor + j + horizon - 1);
                let first = p_first.max(sup_first);
                let last = p_last.min(sup_last);
                if first <= last {
                    samples.push(j);
                    lo = lo.min(first);
                    hi = hi.max(last);
                }
            }
            if !samples.is_empty() {
                violations += samples.len();
                overlaps.push(OverlapRecord {
                    source: upd.source,
                    applied_before: upd.applied_before,
                    later_batch: later,
                    samples,
                    first_row: lo,
                    last_row: hi,
                });
            }
        }
    }
    let sufficient_condition = plan
        .windows(2)
        .map(|w| horizon >= w[0].1 + w[1].1)
        .collect();
    Ok(LeakageReport {
        horizon,
        batches: plan.len(),
        updates: schedule.len(),
        overlaps,
        violations,
        sufficient_condition,
    })
}

/// Leakage of a streaming protocol that updates on each batch's own targets
/// before predicting the next batch.
pub fn audit_streaming_leakage(plan: &[(usize, usize)], horizon: usize) -> Result<LeakageReport> {
    validate_plan(plan, horizon)?;
    audit_update_schedule(plan, horizon, &streaming_schedule(plan))
}

/// `(anchor, size)` pairs of consecutive batches starting after `first_anchor`.
pub fn plan_from_sizes(first_anchor: usize, sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut anchor = first_anchor;
    sizes
        .iter()
        .map(|&b| {
            let entry = (anchor, b);
            anchor += b;
            entry
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn brute_force(plan: &[(usize, usize)], horizon: usize, schedule: &[ScheduledUpdate]) -> usize {
        let mut count = 0;
        for upd in schedule {
            let (a, b) = plan[upd.source];
            let sup: BTreeSet<usize> = (a + 1..=a + horizon + b - 1).collect();
            for &(anchor, size) in &plan[upd.applied_before..] {
                for j in 1..=size {
                    let pred: BTreeSet<usize> = (anchor + j..=anchor + j + horizon - 1).collect();
                    if sup.intersection(&pred).next().is_some() {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn long_horizon_overlaps_next_batch() {
        let plan = plan_from_sizes(100, &[24; 6]);
        let report = audit_streaming_leakage(&plan, 96).unwrap();
        assert!(report.overlaps.iter().any(|o| o.later_batch == o.source + 1));
        assert!(report.sufficient_condition.iter().all(|b| *b));
        assert_eq!(report.violations, brute_force(&plan, 96, &streaming_schedule(&plan)));
    }

    #[test]
    fn short_horizon_touches_only_first_sample() {
        // B = 4, H = 2: batch k supervises [t+1, t+5]; sample 1 of batch k+1
        // predicts [t+5, t+6], every later sample starts past t+5.
        let plan = plan_from_sizes(0, &[4; 8]);
        let report = audit_streaming_leakage(&plan, 2).unwrap();
        assert_eq!(report.violations, 7);
        assert!(report.overlaps.iter().all(|o| o.later_batch == o.source + 1 && o.samples == vec![1]));
        assert_eq!(report.violations, brute_force(&plan, 2, &streaming_schedule(&plan)));
        assert_eq!(report.sufficient_condition_count(), 0);
    }

    #[test]
    fn unit_horizon_is_clean() {
        let plan = plan_from_sizes(0, &[4; 8]);
        assert!(audit_streaming_leakage(&plan, 1).unwrap().is_clean());
        assert_eq!(brute_force(&plan, 1, &streaming_schedule(&plan)), 0);
    }

    #[test]
    fn matches_brute_force_on_irregular_plans() {
        let sizes = [5, 1, 7, 3, 3, 9, 2, 4];
        for horizon in 1..20 {
            let plan = plan_from_sizes(30, &sizes);
            let streaming = streaming_schedule(&plan);
            let report = audit_update_schedule(&plan, horizon, &streaming).unwrap();
            assert_eq!(report.violations, brute_force(&plan, horizon, &streaming), "H={horizon}");
            let matured = matured_schedule(&plan, horizon).unwrap();
            assert_eq!(brute_force(&plan, horizon, &matured), 0);
            assert!(audit_update_schedule(&plan, horizon, &matured).unwrap().is_clean());
        }
    }

    #[test]
    fn inconsistent_anchors_rejected() {
        let plan = vec![(0, 4), (5, 4)];
        assert!(matches!(audit_streaming_leakage(&plan, 8), Err(Error::InvalidPlan(_))));
    }
}
