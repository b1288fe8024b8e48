//! Extrapolation-error propagation and concentrability coefficients.
//!
//! Errors live on (state, joint action) pairs. With the pairs split into seen
//! and unseen blocks, the error vector solves
//!
//! ```text
//! [eps_s]         [P_ss P_su] [eps_s]   [ 0   ]
//! [eps_u] = gamma [P_us P_uu] [eps_u] + [eps_b]
//! ```
//!
//! where `P(s',a'|s,a) = P(s'|s,a) pi(a'|s')` and `eps_b` is the error
//! injected on unseen pairs. Seen pairs come first, each block ordered
//! state-major and action-minor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetHeader, OfflineDataset};
use crate::mdp::{
    build_mmdp, JointPolicy, MmdpSpec, PolicyTable, Step, TabularMdp, Trajectory, TAU1, TAU2,
};
use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("the propagation bound assumes a deterministic mdp")]
    Stochastic,
    #[error("error system is singular")]
    Singular,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mdp(#[from] crate::mdp::MdpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSystem {
    pub p_ss: DMatrix<f64>,
    pub p_su: DMatrix<f64>,
    pub p_us: DMatrix<f64>,
    pub p_uu: DMatrix<f64>,
    pub eps_b: DVector<f64>,
    pub gamma: f64,
    pub seen_pairs: Vec<(usize, usize)>,
    pub unseen_pairs: Vec<(usize, usize)>,
    /// False when the dynamics are stochastic; the system still solves but
    /// the propagation bound does not apply.
    pub deterministic: bool,
}

/// Assembles the pair-level transition matrix under `policy` and partitions it by `seen_mask`.
pub fn build_error_system(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    seen_mask: &[bool],
    eps_b: &[f64],
) -> Result<ErrorSystem, AnalysisError> {
    let (ns, na) = (mdp.num_states(), mdp.num_joint_actions());
    if policy.num_states() != ns || policy.num_actions() != na || seen_mask.len() != ns * na {
        return Err(AnalysisError::DimensionMismatch(
            "policy or seen mask shape".into(),
        ));
    }
    if (0..ns).any(|s| !policy.is_defined(s)) {
        return Err(AnalysisError::DimensionMismatch(
            "policy undefined at some state".into(),
        ));
    }
    let pairs = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a)));
    let seen_pairs: Vec<_> = pairs
        .clone()
        .filter(|&(s, a)| seen_mask[s * na + a])
        .collect();
    let unseen_pairs: Vec<_> = pairs.filter(|&(s, a)| !seen_mask[s * na + a]).collect();
    if eps_b.len() != unseen_pairs.len() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "{} injected errors for {} unseen pairs",
            eps_b.len(),
            unseen_pairs.len()
        )));
    }
    let block = |rows: &[(usize, usize)], cols: &[(usize, usize)]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            let (s, a) = rows[i];
            let (n, b) = cols[j];
            mdp.transition(s, a, n) * policy.prob(n, b).expect("policy defined")
        })
    };
    Ok(ErrorSystem {
        p_ss: block(&seen_pairs, &seen_pairs),
        p_su: block(&seen_pairs, &unseen_pairs),
        p_us: block(&unseen_pairs, &seen_pairs),
        p_uu: block(&unseen_pairs, &unseen_pairs),
        eps_b: DVector::from_column_slice(eps_b),
        gamma: mdp.gamma(),
        seen_pairs,
        unseen_pairs,
        deterministic: mdp.is_deterministic(),
    })
}

impl ErrorSystem {
    pub fn num_seen(&self) -> usize {
        self.seen_pairs.len()
    }

    pub fn num_unseen(&self) -> usize {
        self.unseen_pairs.len()
    }

    /// The full pair transition matrix, seen block first.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let (s, u) = (self.num_seen(), self.num_unseen());
        let mut m = DMatrix::zeros(s + u, s + u);
        m.view_mut((0, 0), (s, s)).copy_from(&self.p_ss);
        m.view_mut((0, s), (s, u)).copy_from(&self.p_su);
        m.view_mut((s, 0), (u, s)).copy_from(&self.p_us);
        m.view_mut((s, s), (u, u)).copy_from(&self.p_uu);
        m
    }

    /// Right-hand side `[0; eps_b]`.
    pub fn source(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.num_seen() + self.num_unseen());
        v.rows_mut(self.num_seen(), self.num_unseen())
            .copy_from(&self.eps_b);
        v
    }
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Exact solution `(eps_s, eps_u)` of the propagation system.
pub fn solve_error_system(
    sys: &ErrorSystem,
) -> Result<(DVector<f64>, DVector<f64>), AnalysisError> {
    let p = sys.full_matrix();
    let n = p.nrows();
    let a = DMatrix::identity(n, n) - p * sys.gamma;
    let eps = a.lu().solve(&sys.source()).ok_or(AnalysisError::Singular)?;
    let s = sys.num_seen();
    Ok((eps.rows(0, s).into_owned(), eps.rows(s, n - s).into_owned()))
}

/// `gamma ||P_su|| / ((1 - gamma)(1 - gamma ||P_ss||)) * ||eps_b||`, infinite
/// when `gamma ||P_ss|| >= 1`.
pub fn theorem1_bound(sys: &ErrorSystem) -> Result<f64, AnalysisError> {
    if !sys.deterministic {
        return Err(AnalysisError::Stochastic);
    }
    let p_su = inf_norm(&sys.p_su);
    let eps = vec_inf_norm(&sys.eps_b);
    if p_su == 0.0 || eps == 0.0 {
        return Ok(0.0);
    }
    let contraction = sys.gamma * inf_norm(&sys.p_ss);
    if contraction >= 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(sys.gamma * p_su / ((1.0 - sys.gamma) * (1.0 - contraction)) * eps)
}

/// How the dataset's state marginal is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateMarginal {
    /// Fraction of transitions starting in each state.
    Visitation,
    /// Distinct seen pairs at each state over the total pair count `|S| |A|`.
    Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concentrability {
    /// `c(k)` for `k = 1..=k_max`.
    pub c: Vec<f64>,
    /// Truncated coefficient `(1-gamma)^2 sum_{k<=k_max} k gamma^{k-1} c(k)`.
    pub coefficient: f64,
    /// Bound on the omitted tail, using `max_k c(k)`.
    pub tail_bound: f64,
    /// A reachable state has zero dataset mass.
    pub infinite: bool,
}

/// Dataset state marginal `rho(s)`.
pub fn state_marginal(ds: &OfflineDataset, kind: StateMarginal) -> Vec<f64> {
    let ns = ds.num_states();
    let na = ds.num_joint_actions();
    match kind {
        StateMarginal::Visitation => {
            let total = ds.num_transitions() as f64;
            (0..ns).map(|s| ds.state_count(s) as f64 / total).collect()
        }
        StateMarginal::Coverage => (0..ns)
            .map(|s| {
                let seen = (0..na).filter(|&a| ds.pair_count(s, a) > 0).count();
                seen as f64 / (ns * na) as f64
            })
            .collect(),
    }
}

fn state_transition(mdp: &TabularMdp, policy: &JointPolicy) -> DMatrix<f64> {
    let ns = mdp.num_states();
    let mut m = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.num_joint_actions() {
            let p = policy.joint_prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (n, &t) in mdp.transition_row(s, a).iter().enumerate() {
                m[(s, n)] += p * t;
            }
        }
    }
    m
}

/// `c(k) = max_s rho_0 P^{pi_1} ... P^{pi_k}(s) / rho(s)` and the weighted sum `C`.
///
/// `policies[k-1]` is applied at step `k`; the last policy repeats when the
/// sequence is shorter than `k_max`.
pub fn concentrability(
    mdp: &TabularMdp,
    ds: &OfflineDataset,
    policies: &[JointPolicy],
    k_max: usize,
    marginal: StateMarginal,
) -> Result<Concentrability, AnalysisError> {
    if policies.is_empty() || k_max == 0 {
        return Err(AnalysisError::DimensionMismatch(
            "need at least one policy and k_max >= 1".into(),
        ));
    }
    if ds.num_states() != mdp.num_states() || ds.num_joint_actions() != mdp.num_joint_actions() {
        return Err(AnalysisError::DimensionMismatch("dataset vs mdp".into()));
    }
    let rho = state_marginal(ds, marginal);
    let gamma = mdp.gamma();
    let ns = mdp.num_states();
    let matrices: Vec<DMatrix<f64>> = policies.iter().map(|p| state_transition(mdp, p)).collect();
    let mut dist = DVector::zeros(ns).transpose();
    dist[mdp.initial_state()] = 1.0;
    let mut c = Vec::with_capacity(k_max);
    let mut infinite = false;
    for k in 1..=k_max {
        let m = &matrices[(k - 1).min(matrices.len() - 1)];
        dist = &dist * m;
        let mut ck: f64 = 0.0;
        for s in 0..ns {
            if dist[s] > 0.0 {
                if rho[s] == 0.0 {
                    infinite = true;
                    ck = f64::INFINITY;
                } else {
                    ck = ck.max(dist[s] / rho[s]);
                }
            }
        }
        c.push(ck);
    }
    let scale = (1.0 - gamma).powi(2);
    let coefficient = scale
        * c.iter()
            .enumerate()
            .map(|(i, ck)| (i + 1) as f64 * gamma.powi(i as i32) * ck)
            .sum::<f64>();
    // sum_{k>K} k g^{k-1} = ((K+1) g^K (1-g) + g^{K+1}) / (1-g)^2
    let big_k = k_max as f64;
    let tail_sum =
        ((big_k + 1.0) * gamma.powf(big_k) * (1.0 - gamma) + gamma.powf(big_k + 1.0)) / scale;
    let c_max = c.iter().copied().fold(0.0, f64::max);
    Ok(Concentrability {
        c,
        coefficient,
        tail_bound: scale * tail_sum * c_max,
        infinite,
    })
}

/// MMDP buffer under the sparse-coverage regime: exactly one randomly chosen
/// joint action per state, each stored once as a single-step trajectory.
pub fn sparse_mmdp_dataset(
    spec: &MmdpSpec,
    seed: u64,
) -> Result<(TabularMdp, OfflineDataset), AnalysisError> {
    let mdp = build_mmdp(spec)?;
    let mut rng = seeded(seed);
    let na = mdp.num_joint_actions();
    let trajectories = [TAU2, TAU1]
        .into_iter()
        .map(|state| {
            let action = rng.random_range(0..na);
            let next_state = if mdp.transition(state, action, TAU1) == 1.0 {
                TAU1
            } else {
                TAU2
            };
            Trajectory {
                steps: vec![Step {
                    state,
                    action,
                    reward: mdp.reward(state, action),
                    next_state,
                    done: false,
                }],
                behavior_probs: None,
            }
        })
        .collect();
    let ds = OfflineDataset::new(DatasetHeader::for_mdp(&mdp), trajectories)?;
    Ok((mdp, ds))
}

/// Concentrability of uniformly random individual policies on the MMDP with
/// `num_agents` agents under the sparse-coverage regime.
pub fn mmdp_concentrability(
    num_agents: usize,
    k_max: usize,
    seed: u64,
) -> Result<Concentrability, AnalysisError> {
    let (mdp, ds) = sparse_mmdp_dataset(&MmdpSpec::new(num_agents), seed)?;
    let uniform = JointPolicy::uniform(mdp.action_space(), mdp.num_states());
    concentrability(&mdp, &ds, &[uniform], k_max, StateMarginal::Coverage)
}
