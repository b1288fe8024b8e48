use super::{LearnerError, ZMode};
use crate::mdp::PolicyTable;
use crate::qtable::QTable;

/// Per-sample partition-function estimates, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizers {
    pub log_z: Vec<f64>,
}

impl Normalizers {
    pub fn z(&self, i: usize) -> f64 {
        self.log_z[i].exp()
    }

    /// `exp(q / alpha) / Z` for sample `i`.
    pub fn rho(&self, i: usize, q: f64, alpha: f64) -> f64 {
        (q / alpha - self.log_z[i]).exp()
    }
}

/// `log(mean_j exp(x_j))`, stable for large `x`.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + (sum / x.len() as f64).ln()
}

/// `log sum_a mu(a) exp(q(a) / alpha)` over actions with `mu > 0`.
pub fn behavior_log_z(q_row: &[f64], mu_row: &[f64], alpha: f64) -> Option<f64> {
    let terms: Vec<(f64, f64)> = q_row
        .iter()
        .zip(mu_row)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&q, &m)| (m.ln(), q / alpha))
        .collect();
    if terms.is_empty() {
        return None;
    }
    let max = terms
        .iter()
        .map(|(lm, x)| lm + x)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|(lm, x)| (lm + x - max).exp()).sum();
    Some(max + sum.ln())
}

/// Normalizers for the `(state, action)` samples of `batch`.
///
/// Behavior-model mode sums over the seen actions of each sample's state and
/// needs `mu`; minibatch mode shares one normalizer, the mean of
/// `exp(Q/alpha)` over the batch itself.
pub fn compute_z(
    batch: &[(usize, usize)],
    q: &QTable,
    mu: Option<&PolicyTable>,
    alpha: f64,
    mode: ZMode,
) -> Result<Normalizers, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    if !(alpha > 0.0) {
        return Err(LearnerError::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    for &(s, a) in batch {
        if s >= q.num_states() || a >= q.num_actions() {
            return Err(LearnerError::Dimension(format!(
                "sample ({s}, {a}) outside the table"
            )));
        }
    }
    match mode {
        ZMode::MinibatchSoftmax => {
            let scaled: Vec<f64> = batch.iter().map(|&(s, a)| q.get(s, a) / alpha).collect();
            let log_z = log_mean_exp(&scaled);
            Ok(Normalizers {
                log_z: vec![log_z; batch.len()],
            })
        }
        ZMode::BehaviorModel => {
            let mu = mu.ok_or(LearnerError::MissingBehavior)?;
            if mu.num_states() != q.num_states() || mu.num_actions() != q.num_actions() {
                return Err(LearnerError::Dimension(
                    "behavior table shape differs from Q".into(),
                ));
            }
            let log_z = batch
                .iter()
                .map(|&(s, _)| {
                    let row = mu
                        .row(s)
                        .ok_or(LearnerError::UndefinedBehavior { state: s })?;
                    behavior_log_z(q.row(s), row, alpha)
                        .ok_or(LearnerError::UndefinedBehavior { state: s })
                })
                .collect::<Result<_, _>>()?;
            Ok(Normalizers { log_z })
        }
    }
}
