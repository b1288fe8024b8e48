use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;

/// One logged training interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Critic estimate at the initial state for the greedy joint action;
    /// `None` for critic-free learners.
    pub q_estimate: Option<f64>,
    /// Losses of the most recent step; `None` before the first step.
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    /// Mean undiscounted evaluation return of the greedy decentralized policy.
    pub eval_return: f64,
    /// Discounted Monte-Carlo value of the same policy from the initial state.
    pub policy_value: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub records: Vec<MetricRecord>,
    /// Discounted Monte-Carlo value of the optimal policy, the divergence reference.
    pub true_value: f64,
    pub first_divergence: Option<usize>,
    /// Count of policy decisions made at states where every action was masked.
    pub masked_fallbacks: u64,
}

impl TrainMetrics {
    pub fn new(true_value: f64) -> Self {
        Self {
            records: Vec::new(),
            true_value,
            first_divergence: None,
            masked_fallbacks: 0,
        }
    }

    pub fn diverged(&self) -> bool {
        self.first_divergence.is_some()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn max_q_estimate(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.q_estimate)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_q_estimate(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.q_estimate)
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn push(&mut self, record: MetricRecord) {
        if record.diverged && self.first_divergence.is_none() {
            self.first_divergence = Some(record.step);
        }
        self.records.push(record);
    }
}

/// Divergence rule: estimate above ten times the reference value, or non-finite.
pub fn is_divergent(q_estimate: f64, true_value: f64) -> bool {
    !q_estimate.is_finite() || q_estimate > 10.0 * true_value.abs()
}

/// Records every (state, joint action) pair whose value is read while building
/// critic targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAudit {
    num_actions: usize,
    reads: Vec<u64>,
}

impl TargetAudit {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            reads: vec![0; num_states * num_actions],
        }
    }

    pub(crate) fn record(&mut self, state: usize, action: usize) {
        self.reads[state * self.num_actions + action] += 1;
    }

    pub fn reads(&self, state: usize, action: usize) -> u64 {
        self.reads[state * self.num_actions + action]
    }

    pub fn total_reads(&self) -> u64 {
        self.reads.iter().sum()
    }

    /// Pairs that were read but never occur in `ds`.
    pub fn unseen_reads(&self, ds: &OfflineDataset) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, &n) in self.reads.iter().enumerate() {
            let (s, a) = (i / self.num_actions, i % self.num_actions);
            if n > 0 && ds.pair_count(s, a) == 0 {
                out.push((s, a));
            }
        }
        out
    }
}
