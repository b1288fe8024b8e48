//! Trajectory-level multi-step targets.
//!
//! All three estimators share the recursion
//!
//! ```text
//! G_t = r_t + gamma * B_{t+1} + gamma * lambda * c_{t+1} * (G_{t+1} - Q(s_{t+1}, a_{t+1}))
//! ```
//!
//! which differ only in the bootstrap `B` and the trace coefficient `c`:
//!
//! * implicit constraint: `B = rho * Q(s', a')`, `c = 1`, with
//!   `rho = exp(Q(s',a')/alpha) / Z(s')`;
//! * Q(lambda): `B = E_pi Q(s', .)`, `c = 1`;
//! * Tree Backup: `B = E_pi Q(s', .)`, `c = pi(a'|s')`.
//!
//! A terminal step returns its reward. A trajectory cut short without a
//! terminal flag bootstraps from the expected next-state value.

use super::{expected_value, icq_target, BatchStats, OperatorError, SoftmaxTarget};
use crate::mdp::{PolicyTable, Trajectory};
use crate::qtable::QTable;

/// Per-step inputs of the shared return recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub reward: f64,
    pub done: bool,
    /// Bootstrap value `B_{t+1}` (ignored when `done`).
    pub bootstrap_next: f64,
    /// `Q(s_{t+1}, a_{t+1})`; `None` at the end of a truncated trajectory.
    pub q_next_taken: Option<f64>,
    /// Trace coefficient `c_{t+1}`.
    pub trace_next: f64,
}

/// Backward evaluation of the trace recursion.
pub fn trace_returns(steps: &[TraceStep], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut targets = vec![0.0; steps.len()];
    let mut next_return: Option<f64> = None;
    for (t, step) in steps.iter().enumerate().rev() {
        let g = if step.done {
            step.reward
        } else {
            let mut g = step.reward + gamma * step.bootstrap_next;
            if let (Some(g_next), Some(q_next)) = (next_return, step.q_next_taken) {
                if lambda != 0.0 {
                    g += gamma * lambda * step.trace_next * (g_next - q_next);
                }
            }
            g
        };
        targets[t] = g;
        next_return = Some(g);
    }
    targets
}

fn behavior_ratio(
    q: &QTable,
    stats: &BatchStats,
    state: usize,
    action: usize,
    alpha: f64,
) -> Result<f64, OperatorError> {
    let mu = stats.mu_row(state)?;
    let f = SoftmaxTarget::new(q.row(state), mu, alpha)
        .ok_or(OperatorError::NoSeenActions { state })?;
    // f(a) = mu(a) exp(Q/alpha) / Z, so rho = f(a) / mu(a).
    Ok(f.weights[action] / mu[action])
}

fn icq_steps(
    trajectory: &Trajectory,
    q: &QTable,
    stats: &BatchStats,
    alpha: f64,
) -> Result<Vec<TraceStep>, OperatorError> {
    let steps = &trajectory.steps;
    let mut out = Vec::with_capacity(steps.len());
    for (t, step) in steps.iter().enumerate() {
        let trace = match steps.get(t + 1) {
            _ if step.done => TraceStep {
                reward: step.reward,
                done: true,
                bootstrap_next: 0.0,
                q_next_taken: None,
                trace_next: 0.0,
            },
            Some(next) => {
                let q_next = q.get(next.state, next.action);
                let rho = behavior_ratio(q, stats, next.state, next.action, alpha)?;
                TraceStep {
                    reward: step.reward,
                    done: false,
                    bootstrap_next: rho * q_next,
                    q_next_taken: Some(q_next),
                    trace_next: 1.0,
                }
            }
            None => TraceStep {
                reward: step.reward,
                done: false,
                bootstrap_next: icq_target(q, stats, step.next_state, alpha)?,
                q_next_taken: None,
                trace_next: 0.0,
            },
        };
        out.push(trace);
    }
    Ok(out)
}

/// Implicit-constraint lambda-returns for every step of `trajectory`.
pub fn lambda_icq_targets(
    trajectory: &Trajectory,
    q: &QTable,
    stats: &BatchStats,
    alpha: f64,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>, OperatorError> {
    check_lambda(lambda)?;
    Ok(trace_returns(
        &icq_steps(trajectory, q, stats, alpha)?,
        gamma,
        lambda,
    ))
}

/// One-step implicit-constraint targets `r_t + gamma * rho * Q(s_{t+1}, a_{t+1})`.
pub fn one_step_icq_targets(
    trajectory: &Trajectory,
    q: &QTable,
    stats: &BatchStats,
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>, OperatorError> {
    Ok(icq_steps(trajectory, q, stats, alpha)?
        .iter()
        .map(|s| {
            if s.done {
                s.reward
            } else {
                s.reward + gamma * s.bootstrap_next
            }
        })
        .collect())
}

fn policy_steps(
    trajectory: &Trajectory,
    q: &QTable,
    policy: &PolicyTable,
    tree_backup: bool,
) -> Result<Vec<TraceStep>, OperatorError> {
    let steps = &trajectory.steps;
    let row = |s: usize| {
        policy
            .row(s)
            .ok_or_else(|| OperatorError::InvalidSpec(format!("policy undefined at state {s}")))
    };
    let mut out = Vec::with_capacity(steps.len());
    for (t, step) in steps.iter().enumerate() {
        if step.done {
            out.push(TraceStep {
                reward: step.reward,
                done: true,
                bootstrap_next: 0.0,
                q_next_taken: None,
                trace_next: 0.0,
            });
            continue;
        }
        let pi = row(step.next_state)?;
        let bootstrap_next = expected_value(q.row(step.next_state), pi);
        let (q_next_taken, trace_next) = match steps.get(t + 1) {
            Some(next) => (
                Some(q.get(next.state, next.action)),
                if tree_backup { pi[next.action] } else { 1.0 },
            ),
            None => (None, 0.0),
        };
        out.push(TraceStep {
            reward: step.reward,
            done: false,
            bootstrap_next,
            q_next_taken,
            trace_next,
        });
    }
    Ok(out)
}

/// Tree Backup returns: corrections weighted by the product of target-policy probabilities.
pub fn tree_backup_targets(
    trajectory: &Trajectory,
    q: &QTable,
    policy: &PolicyTable,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>, OperatorError> {
    check_lambda(lambda)?;
    Ok(trace_returns(
        &policy_steps(trajectory, q, policy, true)?,
        gamma,
        lambda,
    ))
}

/// Q(lambda) returns: corrections weighted by `lambda` alone.
pub fn q_lambda_targets(
    trajectory: &Trajectory,
    q: &QTable,
    policy: &PolicyTable,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>, OperatorError> {
    check_lambda(lambda)?;
    Ok(trace_returns(
        &policy_steps(trajectory, q, policy, false)?,
        gamma,
        lambda,
    ))
}

fn check_lambda(lambda: f64) -> Result<(), OperatorError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(OperatorError::InvalidSpec(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    Ok(())
}
