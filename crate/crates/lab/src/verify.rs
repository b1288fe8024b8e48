//! Randomized property suites for the error-propagation bound, the operator
//! gap, the softmax gap, the policy-loss decomposition, and concentrability.

use std::path::Path;

use icq_core::error_analysis::{
    build_error_system, mmdp_concentrability, solve_error_system, theorem1_bound, vec_inf_norm,
};
use icq_core::learners::decomposition::{decomposed_policy_loss, joint_policy_loss, LossCase};
use icq_core::operators::{
    icq_row_target, ratio_constant, softmax_gap_bound, theorem2_gap, BatchStats,
};
use icq_core::rng::{derive_seed, seeded, LabRng};
use icq_core::{ActionSpace, PolicyTable, QTable, TabularMdp};
use rand::Rng;
use serde::Serialize;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Theorem1,
    Theorem2,
    Lemma1,
    Theorem3,
    Remark1,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Theorem1,
        Suite::Theorem2,
        Suite::Lemma1,
        Suite::Theorem3,
        Suite::Remark1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Theorem2 => "theorem2",
            Suite::Lemma1 => "lemma1",
            Suite::Theorem3 => "theorem3",
            Suite::Remark1 => "remark1",
        }
    }

    pub fn default_instances(self) -> usize {
        match self {
            Suite::Theorem1 | Suite::Theorem3 => 100,
            Suite::Lemma1 => 50,
            Suite::Theorem2 => ALPHA_GRID.len(),
            Suite::Remark1 => 5,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| LabError::UnknownSuite(s.to_string()))
    }
}

/// One checked instance: `observed` must not exceed `bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub suite: &'static str,
    pub instance: usize,
    /// Instance coordinate for plotting: index, `1/alpha`, `alpha` or seed.
    pub param: f64,
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: Vec<InstanceResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> usize {
        self.instances.iter().filter(|i| i.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.instances.len()
    }

    pub fn summary(&self) -> String {
        let worst = self
            .instances
            .iter()
            .map(|i| i.observed - i.bound)
            .fold(f64::NEG_INFINITY, f64::max);
        format!(
            "{}: {}/{} passed (max observed - bound = {worst:.3e})",
            self.suite.name(),
            self.passed(),
            self.instances.len()
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| LabError::csv(path, e))?;
        for i in &self.instances {
            w.serialize(i).map_err(|e| LabError::csv(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))
    }
}

/// `instances = None` uses the suite's default count. The operator-gap suite
/// always runs its fixed grid.
pub fn run_suite(suite: Suite, instances: Option<usize>, seed: u64) -> Result<SuiteReport> {
    let count = instances.unwrap_or(suite.default_instances());
    let mut rng = seeded(derive_seed(seed, 700 + suite as u64));
    let instances = match suite {
        Suite::Theorem1 => (0..count)
            .map(|i| propagation_instance(i, &mut rng))
            .collect::<Result<_>>()?,
        Suite::Theorem2 => operator_gap_grid()?,
        Suite::Lemma1 => (0..count)
            .map(|i| softmax_gap_instance(i, &mut rng))
            .collect(),
        Suite::Theorem3 => (0..count)
            .map(|i| decomposition_instance(i, &mut rng))
            .collect(),
        Suite::Remark1 => (0..count)
            .map(|i| concentrability_instance(i, derive_seed(seed, i as u64)))
            .collect::<Result<_>>()?,
    };
    Ok(SuiteReport { suite, instances })
}

fn probability_row(rng: &mut LabRng, len: usize, zero_chance: f64) -> Vec<f64> {
    let keep = rng.random_range(0..len);
    let raw: Vec<f64> = (0..len)
        .map(|a| {
            if a != keep && rng.random_bool(zero_chance) {
                0.0
            } else {
                rng.random_range(0.05..1.0)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Random deterministic MDP with at most 6 states and 8 actions.
pub fn random_deterministic_mdp(rng: &mut LabRng) -> Result<TabularMdp> {
    let ns = rng.random_range(2..=6);
    let na = rng.random_range(2..=8);
    let mut transition = vec![0.0; ns * na * ns];
    for pair in 0..ns * na {
        transition[pair * ns + rng.random_range(0..ns)] = 1.0;
    }
    let reward = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma = rng.random_range(0.5..0.99);
    Ok(TabularMdp::new(
        ns,
        ActionSpace::single(na),
        transition,
        reward,
        gamma,
        0,
        50,
    )?)
}

fn propagation_instance(index: usize, rng: &mut LabRng) -> Result<InstanceResult> {
    let mdp = random_deterministic_mdp(rng)?;
    let (ns, na) = (mdp.num_states(), mdp.num_joint_actions());
    let probs = (0..ns)
        .flat_map(|_| probability_row(rng, na, 0.3))
        .collect();
    let policy = PolicyTable::new(ns, na, probs)?;
    let mut seen: Vec<bool> = (0..ns * na).map(|_| rng.random_bool(0.6)).collect();
    // keep both blocks nonempty
    seen[0] = true;
    seen[ns * na - 1] = false;
    let unseen = seen.iter().filter(|s| !**s).count();
    let eps_b: Vec<f64> = (0..unseen).map(|_| rng.random_range(0.0..1.0)).collect();
    let sys = build_error_system(&mdp, &policy, &seen, &eps_b)?;
    let (eps_s, _) = solve_error_system(&sys)?;
    let observed = vec_inf_norm(&eps_s);
    let bound = theorem1_bound(&sys)?;
    Ok(InstanceResult {
        suite: "theorem1",
        instance: index,
        param: index as f64,
        observed,
        bound,
        passed: observed <= bound + 1e-9,
        detail: format!(
            "{ns} states, {na} actions, {unseen} unseen, gamma {:.3}",
            mdp.gamma()
        ),
    })
}

pub const ALPHA_GRID: [f64; 5] = [20.0, 5.0, 1.0, 0.5, 0.1];
pub const GAP_ITERATIONS: usize = 200;

/// Three-state, two-action MDP with nonnegative rewards and a full-support behavior.
pub fn gap_fixture() -> Result<(TabularMdp, BatchStats)> {
    let next = [1, 2, 0, 2, 1, 0];
    let mut transition = vec![0.0; 3 * 2 * 3];
    for (pair, n) in next.into_iter().enumerate() {
        transition[pair * 3 + n] = 1.0;
    }
    let reward = vec![0.1, 0.5, 0.0, 1.0, 0.3, 0.2];
    let mdp = TabularMdp::new(3, ActionSpace::single(2), transition, reward, 0.9, 0, 50)?;
    let mu = PolicyTable::new(3, 2, vec![0.5, 0.5, 0.2, 0.8, 0.6, 0.4])?;
    Ok((mdp, BatchStats::from_behavior(mu)))
}

/// Per alpha: gap within its bound, gap below the previous (larger) alpha's,
/// and the implicit-constraint iterate below the optimal Q.
fn operator_gap_grid() -> Result<Vec<InstanceResult>> {
    let (mdp, stats) = gap_fixture()?;
    let q_star = mdp.optimal_q(1e-13, 100_000);
    let mut previous = f64::INFINITY;
    let mut out = Vec::new();
    for (i, alpha) in ALPHA_GRID.into_iter().enumerate() {
        let report = theorem2_gap(&mdp, &stats, alpha, GAP_ITERATIONS)?;
        let excess = report
            .icq_q
            .values()
            .iter()
            .zip(q_star.values())
            .map(|(q, s)| q - s)
            .fold(f64::NEG_INFINITY, f64::max);
        let within = report.gap <= report.bound;
        let shrinking = report.gap < previous;
        let below_optimal = excess <= 1e-8;
        out.push(InstanceResult {
            suite: "theorem2",
            instance: i,
            param: 1.0 / alpha,
            observed: report.gap,
            bound: report.bound,
            passed: within && shrinking && below_optimal,
            detail: format!(
                "alpha {alpha}: within bound {within}, below previous gap {shrinking}, max(Q_icq - Q*) = {excess:.3e}"
            ),
        });
        previous = report.gap;
    }
    Ok(out)
}

fn softmax_gap_instance(index: usize, rng: &mut LabRng) -> InstanceResult {
    let na = rng.random_range(2..=8);
    let scale = rng.random_range(0.1..10.0);
    let q: Vec<f64> = (0..na).map(|_| rng.random_range(-scale..scale)).collect();
    let mu = probability_row(rng, na, 0.3);
    let alpha = 10f64.powf(rng.random_range(-1.5..1.5));
    let seen: Vec<usize> = (0..na).filter(|&a| mu[a] > 0.0).collect();
    let max = seen.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
    let observed = max - icq_row_target(&q, &mu, alpha).expect("a seen action exists");
    let table = QTable::from_values(1, na, q);
    let stats = BatchStats::from_behavior(PolicyTable::new(1, na, mu).expect("valid row"));
    let bound = ratio_constant(&table, &stats).map_or(0.0, |c| {
        softmax_gap_bound(seen.len(), c, alpha, table.max_abs())
    });
    InstanceResult {
        suite: "lemma1",
        instance: index,
        param: alpha,
        observed,
        bound,
        passed: observed <= bound + 1e-12,
        detail: format!("{} seen of {na}, alpha {alpha:.4}", seen.len()),
    }
}

/// Random per-agent utilities, mixing weights, behavior and policy rows.
pub fn random_loss_case(rng: &mut LabRng, num_agents: usize, num_actions: usize) -> LossCase {
    let rows = |rng: &mut LabRng| {
        (0..num_agents)
            .map(|_| probability_row(rng, num_actions, 0.0))
            .collect()
    };
    LossCase {
        q: (0..num_agents)
            .map(|_| {
                (0..num_actions)
                    .map(|_| rng.random_range(-5.0..5.0))
                    .collect()
            })
            .collect(),
        weights: (0..num_agents)
            .map(|_| rng.random_range(0.0..2.0))
            .collect(),
        bias: rng.random_range(-3.0..3.0),
        mu: rows(rng),
        pi: rows(rng),
        alpha: rng.random_range(0.2..5.0),
    }
}

fn decomposition_instance(index: usize, rng: &mut LabRng) -> InstanceResult {
    let n = 2 + index % 2;
    let case = random_loss_case(rng, n, 2);
    let joint = joint_policy_loss(&case);
    let split = decomposed_policy_loss(&case);
    let observed = (joint - split).abs();
    InstanceResult {
        suite: "theorem3",
        instance: index,
        param: n as f64,
        observed,
        bound: 1e-10,
        passed: observed < 1e-10,
        detail: format!("{n} agents: joint {joint:.12}, decomposed {split:.12}"),
    }
}

pub const REMARK_K_MAX: usize = 200;

/// Concentrability for one to four agents under sparse coverage; passes when
/// strictly increasing. `observed` is the negated smallest increment.
fn concentrability_instance(index: usize, seed: u64) -> Result<InstanceResult> {
    let values = (1..=4)
        .map(|n| Ok(mmdp_concentrability(n, REMARK_K_MAX, seed)?.coefficient))
        .collect::<Result<Vec<f64>>>()?;
    let min_step = values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(InstanceResult {
        suite: "remark1",
        instance: index,
        param: seed as f64,
        observed: -min_step,
        bound: 0.0,
        passed: min_step > 0.0,
        detail: format!("C for n=1..4: {values:?}"),
    })
}
