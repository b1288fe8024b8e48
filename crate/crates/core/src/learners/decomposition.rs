//! Joint versus per-agent implicit-constraint policy losses at a single state.
//!
//! With `Q_tot = sum_i w^i Q^i + b`, a factored behavior `mu = prod_i mu^i` and
//! a factored policy, the joint weighted likelihood loss splits exactly into a
//! sum of per-agent losses with weights `exp(w^i Q^i / alpha) / Z^i`.

use crate::mdp::ActionSpace;

use super::z::behavior_log_z;

/// Tabular ingredients at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCase {
    /// `[agent][action]` utilities.
    pub q: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `[agent][action]` behavior rows.
    pub mu: Vec<Vec<f64>>,
    /// `[agent][action]` policy rows.
    pub pi: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl LossCase {
    fn space(&self) -> ActionSpace {
        ActionSpace::new(self.q.len(), self.q[0].len()).expect("valid case")
    }
}

/// Per-agent weights `exp(w Q(a) / alpha) / Z` with `Z = sum_a mu(a) exp(w Q(a) / alpha)`.
pub fn agent_weights(q: &[f64], weight: f64, mu: &[f64], alpha: f64) -> Vec<f64> {
    let scaled: Vec<f64> = q.iter().map(|x| weight * x).collect();
    let log_z = behavior_log_z(&scaled, mu, alpha).unwrap_or(f64::NAN);
    scaled.iter().map(|x| (x / alpha - log_z).exp()).collect()
}

/// `E_{a ~ mu}[ -exp(Q_tot(a)/alpha) / Z * log pi(a) ]`, enumerating joint actions.
pub fn joint_policy_loss(case: &LossCase) -> f64 {
    let space = case.space();
    let na = space.num_joint_actions();
    let mut q_tot = Vec::with_capacity(na);
    let mut mu = Vec::with_capacity(na);
    let mut log_pi = Vec::with_capacity(na);
    for joint in 0..na {
        let actions = space.decode(joint);
        let mut q = case.bias;
        let (mut m, mut lp) = (1.0, 0.0);
        for (i, &a) in actions.iter().enumerate() {
            q += case.weights[i] * case.q[i][a];
            m *= case.mu[i][a];
            lp += case.pi[i][a].ln();
        }
        q_tot.push(q);
        mu.push(m);
        log_pi.push(lp);
    }
    let log_z = behavior_log_z(&q_tot, &mu, case.alpha).unwrap_or(f64::NAN);
    (0..na)
        .filter(|&a| mu[a] > 0.0)
        .map(|a| -mu[a] * (q_tot[a] / case.alpha - log_z).exp() * log_pi[a])
        .sum()
}

/// `sum_i E_{a ~ mu^i}[ -exp(w^i Q^i(a)/alpha) / Z^i * log pi^i(a) ]`.
pub fn decomposed_policy_loss(case: &LossCase) -> f64 {
    (0..case.q.len())
        .map(|i| {
            let weights = agent_weights(&case.q[i], case.weights[i], &case.mu[i], case.alpha);
            weights
                .iter()
                .zip(&case.mu[i])
                .zip(&case.pi[i])
                .filter(|((_, m), _)| **m > 0.0)
                .map(|((w, m), p)| -m * w * p.ln())
                .sum::<f64>()
        })
        .sum()
}
