//! Tabular Bellman operators and fixed-point iteration.
//!
//! All operators perform synchronous sweeps over every (state, joint action)
//! pair. The implicit-constraint and batch-constrained kinds only ever read
//! next-state values of pairs that occur in the dataset.

mod traces;

pub use traces::{
    lambda_icq_targets, one_step_icq_targets, q_lambda_targets, trace_returns, tree_backup_targets,
    TraceStep,
};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataset::OfflineDataset;
use crate::mdp::{argmax_lowest, PolicyTable, TabularMdp};
use crate::qtable::QTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("state {state} has no seen actions")]
    NoSeenActions { state: usize },
    #[error("invalid operator spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operator needs a behavior estimate")]
    MissingBehavior,
    #[error("operator needs an evaluation policy")]
    MissingPolicy,
    #[error("behavior estimate is undefined at state {state}")]
    UndefinedBehavior { state: usize },
    #[error("iteration diverged at sweep {iteration} (residual {last_residual:e})")]
    Diverged {
        iteration: usize,
        last_residual: f64,
        residuals: Vec<f64>,
    },
    #[error("trace system is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// Expected backup under an explicit policy.
    Standard,
    /// Expected backup written as an importance-weighted expectation under the behavior policy.
    ImportanceSampled,
    /// Implicit-constraint softmax backup over seen actions.
    Icq,
    /// Max over seen actions.
    Bcq,
    TreeBackup,
    QLambda,
    IcqLambda,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Lagrangian temperature of the implicit-constraint kinds.
    pub alpha: f64,
    /// Trace decay of the trace-based kinds.
    pub lambda: f64,
}

impl OperatorSpec {
    pub fn standard() -> Self {
        Self::of(OperatorKind::Standard)
    }

    pub fn importance_sampled() -> Self {
        Self::of(OperatorKind::ImportanceSampled)
    }

    pub fn bcq() -> Self {
        Self::of(OperatorKind::Bcq)
    }

    pub fn icq(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::of(OperatorKind::Icq)
        }
    }

    pub fn tree_backup(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::of(OperatorKind::TreeBackup)
        }
    }

    pub fn q_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::of(OperatorKind::QLambda)
        }
    }

    pub fn icq_lambda(alpha: f64, lambda: f64) -> Self {
        Self {
            kind: OperatorKind::IcqLambda,
            alpha,
            lambda,
        }
    }

    fn of(kind: OperatorKind) -> Self {
        Self {
            kind,
            alpha: 1.0,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        use OperatorKind::*;
        if matches!(self.kind, Icq | IcqLambda) && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(OperatorError::InvalidSpec(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if matches!(self.kind, TreeBackup | QLambda | IcqLambda)
            && !(0.0..=1.0).contains(&self.lambda)
        {
            return Err(OperatorError::InvalidSpec(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Dataset statistics the batch-aware operators need: the seen/unseen
/// partition and the joint behavior estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    num_states: usize,
    num_actions: usize,
    seen: Vec<bool>,
    mu: PolicyTable,
}

impl BatchStats {
    /// Builds statistics from an explicit behavior table; a pair is seen iff
    /// its behavior probability is positive.
    pub fn from_behavior(mu: PolicyTable) -> Self {
        let (ns, na) = (mu.num_states(), mu.num_actions());
        let seen = (0..ns)
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| mu.prob(s, a).is_some_and(|p| p > 0.0))
            .collect();
        Self {
            num_states: ns,
            num_actions: na,
            seen,
            mu,
        }
    }

    pub fn from_dataset(ds: &OfflineDataset) -> Result<Self, crate::dataset::DatasetError> {
        Ok(Self::from_behavior(ds.estimate_behavior()?.joint_table()))
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn is_seen(&self, state: usize, action: usize) -> bool {
        self.seen[state * self.num_actions + action]
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_actions(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_actions).filter(move |&a| self.is_seen(state, a))
    }

    pub fn behavior(&self) -> &PolicyTable {
        &self.mu
    }

    pub fn mu_row(&self, state: usize) -> Result<&[f64], OperatorError> {
        self.mu
            .row(state)
            .ok_or(OperatorError::UndefinedBehavior { state })
    }
}

/// Softmax weights `f_alpha(Q|mu)` over the actions of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTarget {
    pub weights: Vec<f64>,
}

impl SoftmaxTarget {
    /// Weights `mu(a) exp(Q(a)/alpha) / Z`, zero wherever `mu(a) = 0`.
    ///
    /// Computed in log space with the maximum subtracted, so tiny `alpha`
    /// never overflows.
    pub fn new(q_row: &[f64], mu_row: &[f64], alpha: f64) -> Option<Self> {
        debug_assert_eq!(q_row.len(), mu_row.len());
        let logits: Vec<Option<f64>> = q_row
            .iter()
            .zip(mu_row)
            .map(|(&q, &m)| (m > 0.0).then(|| m.ln() + q / alpha))
            .collect();
        let max = logits
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return None;
        }
        let unnormalized: Vec<f64> = logits
            .iter()
            .map(|l| l.map_or(0.0, |l| (l - max).exp()))
            .collect();
        let z: f64 = unnormalized.iter().sum();
        Some(Self {
            weights: unnormalized.into_iter().map(|w| w / z).collect(),
        })
    }

    pub fn expectation(&self, q_row: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(q_row)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, q)| w * q)
            .sum()
    }
}

/// Implicit-constraint target `sum_a mu exp(Q/alpha) Q / Z` for one row.
pub fn icq_row_target(q_row: &[f64], mu_row: &[f64], alpha: f64) -> Option<f64> {
    SoftmaxTarget::new(q_row, mu_row, alpha).map(|f| f.expectation(q_row))
}

pub fn icq_target(
    q: &QTable,
    stats: &BatchStats,
    state: usize,
    alpha: f64,
) -> Result<f64, OperatorError> {
    let mu = stats.mu_row(state)?;
    icq_row_target(q.row(state), mu, alpha).ok_or(OperatorError::NoSeenActions { state })
}

/// Max over seen actions, ties resolved to the lowest action index.
pub fn bcq_target(q: &QTable, seen_mask: &[bool], state: usize) -> Result<f64, OperatorError> {
    bcq_action(q, seen_mask, state).map(|a| q.get(state, a))
}

pub fn bcq_action(q: &QTable, seen_mask: &[bool], state: usize) -> Result<usize, OperatorError> {
    let na = q.num_actions();
    let seen = &seen_mask[state * na..(state + 1) * na];
    let mut best: Option<usize> = None;
    for (a, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
        if best.is_none_or(|b| q.get(state, a) > q.get(state, b)) {
            best = Some(a);
        }
    }
    best.ok_or(OperatorError::NoSeenActions { state })
}

/// `sum_a probs(a) Q(s,a)`.
pub fn expected_value(q_row: &[f64], probs: &[f64]) -> f64 {
    q_row.iter().zip(probs).map(|(q, p)| p * q).sum()
}

/// Error injected into unseen pairs after every sweep:
/// `Q(s,a_u) <- (1 + relative) * (TQ)(s,a_u) + additive`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnseenError {
    pub additive: f64,
    pub relative: f64,
}

/// Everything a sweep reads besides the current table.
#[derive(Debug, Clone, Copy)]
pub struct Backup<'a> {
    pub mdp: &'a TabularMdp,
    pub stats: Option<&'a BatchStats>,
    pub policy: Option<&'a PolicyTable>,
    pub unseen_error: Option<UnseenError>,
}

impl<'a> Backup<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        Self {
            mdp,
            stats: None,
            policy: None,
            unseen_error: None,
        }
    }

    pub fn with_stats(mut self, stats: &'a BatchStats) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn with_policy(mut self, policy: &'a PolicyTable) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn with_unseen_error(mut self, error: UnseenError) -> Self {
        self.unseen_error = Some(error);
        self
    }

    fn stats(&self) -> Result<&'a BatchStats, OperatorError> {
        self.stats.ok_or(OperatorError::MissingBehavior)
    }

    fn policy(&self) -> Result<&'a PolicyTable, OperatorError> {
        self.policy.ok_or(OperatorError::MissingPolicy)
    }

    fn check(&self, q: &QTable) -> Result<(), OperatorError> {
        let (ns, na) = (self.mdp.num_states(), self.mdp.num_joint_actions());
        if q.num_states() != ns || q.num_actions() != na {
            return Err(OperatorError::DimensionMismatch(format!(
                "q-table {}x{} vs mdp {ns}x{na}",
                q.num_states(),
                q.num_actions()
            )));
        }
        if let Some(stats) = self.stats {
            if stats.num_states() != ns || stats.num_actions() != na {
                return Err(OperatorError::DimensionMismatch(
                    "batch statistics shape".into(),
                ));
            }
        }
        if let Some(policy) = self.policy {
            if policy.num_states() != ns || policy.num_actions() != na {
                return Err(OperatorError::DimensionMismatch("policy shape".into()));
            }
        }
        Ok(())
    }
}

fn policy_row(policy: &PolicyTable, state: usize) -> Result<&[f64], OperatorError> {
    policy
        .row(state)
        .ok_or_else(|| OperatorError::InvalidSpec(format!("policy undefined at state {state}")))
}

/// Per-state bootstrap value `V(s')` used by the one-step kinds.
fn state_values(
    spec: &OperatorSpec,
    q: &QTable,
    backup: &Backup,
) -> Result<Vec<Option<f64>>, OperatorError> {
    use OperatorKind::*;
    let ns = q.num_states();
    let reachable = reachable_next_states(backup.mdp);
    let mut values = vec![None; ns];
    for s in (0..ns).filter(|&s| reachable[s]) {
        let v = match spec.kind {
            Standard | TreeBackup | QLambda => {
                expected_value(q.row(s), policy_row(backup.policy()?, s)?)
            }
            ImportanceSampled => {
                let stats = backup.stats()?;
                let mu = stats.mu_row(s)?;
                let pi = policy_row(backup.policy()?, s)?;
                // sum_a mu(a) (pi(a)/mu(a)) Q(s,a) over the behavior support
                mu.iter()
                    .zip(pi)
                    .zip(q.row(s))
                    .filter(|((m, _), _)| **m > 0.0)
                    .map(|((m, p), q)| m * (p / m) * q)
                    .sum()
            }
            Icq | IcqLambda => icq_target(q, backup.stats()?, s, spec.alpha)?,
            Bcq => bcq_target(q, backup.stats()?.seen_mask(), s)?,
        };
        values[s] = Some(v);
    }
    Ok(values)
}

fn reachable_next_states(mdp: &TabularMdp) -> Vec<bool> {
    let ns = mdp.num_states();
    let mut reachable = vec![false; ns];
    for s in 0..ns {
        for a in 0..mdp.num_joint_actions() {
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p > 0.0 {
                    reachable[next] = true;
                }
            }
        }
    }
    reachable
}

fn one_step(spec: &OperatorSpec, q: &QTable, backup: &Backup) -> Result<QTable, OperatorError> {
    let mdp = backup.mdp;
    let values = state_values(spec, q, backup)?;
    let mut next = QTable::zeros(q.num_states(), q.num_actions());
    for s in 0..q.num_states() {
        for a in 0..q.num_actions() {
            let future: f64 = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(n, p)| p * values[n].expect("reachable states have values"))
                .sum();
            next.set(s, a, mdp.reward(s, a) + mdp.gamma() * future);
        }
    }
    Ok(next)
}

/// Pair-to-pair chain along which trace corrections propagate:
/// `P(s'|s,a) mu(a'|s') c(s',a')`.
fn trace_matrix(spec: &OperatorSpec, backup: &Backup) -> Result<DMatrix<f64>, OperatorError> {
    let mdp = backup.mdp;
    let (ns, na) = (mdp.num_states(), mdp.num_joint_actions());
    let stats = backup.stats()?;
    let mut m = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            for (n, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                // Next states the data never visits carry no behavior trace.
                let Ok(mu) = stats.mu_row(n) else { continue };
                for b in 0..na {
                    let trace = match spec.kind {
                        OperatorKind::TreeBackup => policy_row(backup.policy()?, n)?[b],
                        _ => 1.0,
                    };
                    m[(s * na + a, n * na + b)] = p * mu[b] * trace;
                }
            }
        }
    }
    Ok(m)
}

/// One synchronous sweep of the operator described by `spec`.
///
/// Trace-based kinds are applied in expectation over behavior trajectories:
/// `Q + (I - gamma lambda P_trace)^{-1} (T Q - Q)` where `T` is the matching
/// one-step operator.
pub fn apply_operator(
    spec: &OperatorSpec,
    q: &QTable,
    backup: &Backup,
) -> Result<QTable, OperatorError> {
    use OperatorKind::*;
    spec.validate()?;
    backup.check(q)?;
    let mut next = match spec.kind {
        Standard | ImportanceSampled | Icq | Bcq => one_step(spec, q, backup)?,
        TreeBackup | QLambda | IcqLambda => {
            let base = one_step(spec, q, backup)?;
            let delta = DVector::from_iterator(
                q.values().len(),
                base.values().iter().zip(q.values()).map(|(t, q)| t - q),
            );
            let p = trace_matrix(spec, backup)?;
            let gamma_lambda = backup.mdp.gamma() * spec.lambda;
            let system = DMatrix::identity(p.nrows(), p.ncols()) - p * gamma_lambda;
            let correction = system.lu().solve(&delta).ok_or(OperatorError::Singular)?;
            let values = q
                .values()
                .iter()
                .zip(correction.iter())
                .map(|(q, c)| q + c)
                .collect();
            QTable::from_values(q.num_states(), q.num_actions(), values)
        }
    };
    if let (Some(err), Some(stats)) = (backup.unseen_error, backup.stats) {
        for s in 0..next.num_states() {
            for a in 0..next.num_actions() {
                if !stats.is_seen(s, a) {
                    let v = next.get(s, a);
                    next.set(s, a, (1.0 + err.relative) * v + err.additive);
                }
            }
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixpointOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Residual above which iteration is declared divergent; defaults to
    /// `1e6 * Q_max` with `Q_max = R_max / (1 - gamma)`.
    pub ceiling: Option<f64>,
}

impl Default for FixpointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
            ceiling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixpoint {
    pub q: QTable,
    pub iterations: usize,
    /// Sup-norm change of every sweep.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

pub fn q_max(mdp: &TabularMdp) -> f64 {
    mdp.max_abs_reward() / (1.0 - mdp.gamma())
}

pub fn iterate_to_fixpoint(
    spec: &OperatorSpec,
    q0: &QTable,
    backup: &Backup,
    options: FixpointOptions,
) -> Result<Fixpoint, OperatorError> {
    if !(options.tol > 0.0) {
        return Err(OperatorError::InvalidSpec(
            "tolerance must be positive".into(),
        ));
    }
    let ceiling = options.ceiling.unwrap_or_else(|| {
        let qm = q_max(backup.mdp);
        1e6 * if qm > 0.0 { qm } else { 1.0 }
    });
    let mut q = q0.clone();
    let mut residuals = Vec::new();
    for iteration in 1..=options.max_iters {
        let next = apply_operator(spec, &q, backup)?;
        let residual = next.max_norm_diff(&q);
        residuals.push(residual);
        if !residual.is_finite() || residual > ceiling || !next.is_finite() {
            return Err(OperatorError::Diverged {
                iteration,
                last_residual: residual,
                residuals,
            });
        }
        q = next;
        if residual < options.tol {
            return Ok(Fixpoint {
                q,
                iterations: iteration,
                residuals,
                converged: true,
            });
        }
    }
    Ok(Fixpoint {
        q,
        iterations: options.max_iters,
        residuals,
        converged: false,
    })
}

/// Applies `spec` exactly `k` times from `q0`, returning every iterate
/// including `q0`.
pub fn iterates(
    spec: &OperatorSpec,
    q0: &QTable,
    backup: &Backup,
    k: usize,
) -> Result<Vec<QTable>, OperatorError> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(q0.clone());
    for _ in 0..k {
        let next = apply_operator(spec, out.last().expect("nonempty"), backup)?;
        out.push(next);
    }
    Ok(out)
}

/// Ratio constant of the softmax-gap bound:
/// `inf_s inf_{i>=2} mu(a_[1]|s) / mu(a_[i]|s)`, actions sorted by `Q`
/// descending with ties by index, restricted to seen actions.
///
/// Returns `None` when no state has two or more seen actions.
pub fn ratio_constant(q: &QTable, stats: &BatchStats) -> Option<f64> {
    let mut c: Option<f64> = None;
    for s in 0..q.num_states() {
        let Ok(mu) = stats.mu_row(s) else { continue };
        let seen: Vec<usize> = stats.seen_actions(s).collect();
        if seen.len() < 2 {
            continue;
        }
        let values: Vec<f64> = seen.iter().map(|&a| q.get(s, a)).collect();
        let top = seen[argmax_lowest(&values)];
        for &a in seen.iter().filter(|&&a| a != top) {
            let ratio = mu[top] / mu[a];
            c = Some(c.map_or(ratio, |c: f64| c.min(ratio)));
        }
    }
    c
}

/// Largest number of seen actions at any state.
pub fn max_seen_actions(stats: &BatchStats) -> usize {
    (0..stats.num_states())
        .map(|s| stats.seen_actions(s).count())
        .max()
        .unwrap_or(0)
}

/// `(|A| - 1) max{1/((1/alpha + 1) C + 1), 2 Q_max / (1 + C e^{1/alpha})}`.
pub fn softmax_gap_bound(num_seen: usize, c: f64, alpha: f64, q_max: f64) -> f64 {
    if num_seen < 2 {
        return 0.0;
    }
    let inv = 1.0 / alpha;
    let small = 1.0 / ((inv + 1.0) * c + 1.0);
    // For large 1/alpha the exponential saturates to a zero second term.
    let large = 2.0 * q_max / (1.0 + c * inv.exp());
    (num_seen as f64 - 1.0) * small.max(large)
}

/// Gap between the batch-constrained and implicit-constraint operators after
/// `k` applications from `Q_0 = 0`, together with its exponential-decay bound.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub gap: f64,
    pub bound: f64,
    /// Ratio constant minimized over every implicit-constraint iterate.
    pub c: Option<f64>,
    pub q_max: f64,
    /// Final implicit-constraint iterate.
    pub icq_q: QTable,
    /// Final batch-constrained iterate.
    pub bcq_q: QTable,
}

pub fn theorem2_gap(
    mdp: &TabularMdp,
    stats: &BatchStats,
    alpha: f64,
    k: usize,
) -> Result<GapReport, OperatorError> {
    if k == 0 {
        return Err(OperatorError::InvalidSpec("k must be at least 1".into()));
    }
    let backup = Backup::new(mdp).with_stats(stats);
    let q0 = QTable::zeros(mdp.num_states(), mdp.num_joint_actions());
    let icq = iterates(&OperatorSpec::icq(alpha), &q0, &backup, k)?;
    let bcq = iterates(&OperatorSpec::bcq(), &q0, &backup, k)?;
    let qm = q_max(mdp);
    // The bound's supremum ranges over the tables the softmax is applied to.
    let c = icq[..k]
        .iter()
        .filter_map(|q| ratio_constant(q, stats))
        .reduce(f64::min);
    let num_seen = max_seen_actions(stats);
    let bound = match c {
        Some(c) => {
            let gamma = mdp.gamma();
            gamma / (1.0 - gamma) * softmax_gap_bound(num_seen, c, alpha, qm)
        }
        None => 0.0,
    };
    let (icq_q, bcq_q) = (icq[k].clone(), bcq[k].clone());
    Ok(GapReport {
        gap: bcq_q.max_norm_diff(&icq_q),
        bound,
        c,
        q_max: qm,
        icq_q,
        bcq_q,
    })
}

#[cfg(test)]
mod tests;
