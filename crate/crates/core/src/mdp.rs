//! Tabular (multi-agent) MDPs, factored joint policies and rollouts.
//!
//! Joint actions are encoded as base-`k` integers over the per-agent actions
//! with agent 0 as the least significant digit. With two actions per agent the
//! joint action `(a0, a1, a2)` is `a0 + 2*a1 + 4*a2`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qtable::QTable;
use crate::rng::{sample_index, seeded, LabRng};

const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid mdp: {0}")]
    Invalid(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("number of agents must be at least 1")]
    NoAgents,
    #[error("at least one episode is required")]
    NoEpisodes,
}

/// Shape of the joint action space: `num_agents` agents with `actions_per_agent` actions each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub num_agents: usize,
    pub actions_per_agent: usize,
}

impl ActionSpace {
    pub fn new(num_agents: usize, actions_per_agent: usize) -> Result<Self, MdpError> {
        if num_agents == 0 {
            return Err(MdpError::NoAgents);
        }
        if actions_per_agent == 0 {
            return Err(MdpError::Invalid("agents need at least one action".into()));
        }
        let space = Self {
            num_agents,
            actions_per_agent,
        };
        space.checked_joint_count().ok_or_else(|| {
            MdpError::Invalid(format!(
                "joint action space {actions_per_agent}^{num_agents} is too large"
            ))
        })?;
        Ok(space)
    }

    /// A single agent choosing among `num_actions` actions.
    pub fn single(num_actions: usize) -> Self {
        Self {
            num_agents: 1,
            actions_per_agent: num_actions,
        }
    }

    fn checked_joint_count(&self) -> Option<usize> {
        let n = u32::try_from(self.num_agents).ok()?;
        let count = self.actions_per_agent.checked_pow(n)?;
        // Keep tables addressable.
        (count <= 1 << 24).then_some(count)
    }

    pub fn num_joint_actions(&self) -> usize {
        self.actions_per_agent.pow(self.num_agents as u32)
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.num_agents);
        actions
            .iter()
            .rev()
            .fold(0, |acc, &a| acc * self.actions_per_agent + a)
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        let mut rest = joint;
        (0..self.num_agents)
            .map(|_| {
                let a = rest % self.actions_per_agent;
                rest /= self.actions_per_agent;
                a
            })
            .collect()
    }

    /// Action of `agent` inside a joint action.
    pub fn component(&self, joint: usize, agent: usize) -> usize {
        (joint / self.actions_per_agent.pow(agent as u32)) % self.actions_per_agent
    }
}

/// A finite-state MDP with a (possibly factored) joint action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularMdpRepr", into = "TabularMdpRepr")]
pub struct TabularMdp {
    num_states: usize,
    action_space: ActionSpace,
    num_joint_actions: usize,
    /// `P(s'|s,a)` flattened as `[s][a][s']`.
    transition: Vec<f64>,
    /// `r(s,a)` flattened as `[s][a]`.
    reward: Vec<f64>,
    gamma: f64,
    initial_state: usize,
    horizon: usize,
}

/// Nested-array JSON form of [`TabularMdp`].
#[derive(Serialize, Deserialize)]
struct TabularMdpRepr {
    action_space: ActionSpace,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
    initial_state: usize,
    horizon: usize,
}

impl TryFrom<TabularMdpRepr> for TabularMdp {
    type Error = MdpError;

    fn try_from(repr: TabularMdpRepr) -> Result<Self, Self::Error> {
        let num_states = repr.transition.len();
        let num_actions = repr.transition.first().map_or(0, Vec::len);
        let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, rows) in repr.transition.iter().enumerate() {
            if rows.len() != num_actions {
                return Err(MdpError::Invalid(format!(
                    "state {s} has {} action rows, expected {num_actions}",
                    rows.len()
                )));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != num_states {
                    return Err(MdpError::Invalid(format!(
                        "transition row ({s},{a}) has {} entries, expected {num_states}",
                        row.len()
                    )));
                }
                transition.extend_from_slice(row);
            }
        }
        if repr.reward.len() != num_states || repr.reward.iter().any(|r| r.len() != num_actions) {
            return Err(MdpError::Invalid("reward table shape mismatch".into()));
        }
        let reward = repr.reward.into_iter().flatten().collect();
        TabularMdp::new(
            num_states,
            repr.action_space,
            transition,
            reward,
            repr.gamma,
            repr.initial_state,
            repr.horizon,
        )
    }
}

impl From<TabularMdp> for TabularMdpRepr {
    fn from(mdp: TabularMdp) -> Self {
        let (s_count, a_count) = (mdp.num_states, mdp.num_joint_actions);
        let transition = (0..s_count)
            .map(|s| {
                (0..a_count)
                    .map(|a| mdp.transition_row(s, a).to_vec())
                    .collect()
            })
            .collect();
        let reward = mdp.reward.chunks(a_count).map(<[f64]>::to_vec).collect();
        Self {
            action_space: mdp.action_space,
            transition,
            reward,
            gamma: mdp.gamma,
            initial_state: mdp.initial_state,
            horizon: mdp.horizon,
        }
    }
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        action_space: ActionSpace,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_state: usize,
        horizon: usize,
    ) -> Result<Self, MdpError> {
        let action_space =
            ActionSpace::new(action_space.num_agents, action_space.actions_per_agent)?;
        let num_joint_actions = action_space.num_joint_actions();
        if num_states == 0 {
            return Err(MdpError::Invalid("no states".into()));
        }
        if transition.len() != num_states * num_joint_actions * num_states {
            return Err(MdpError::Invalid(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_states * num_joint_actions * num_states
            )));
        }
        if reward.len() != num_states * num_joint_actions {
            return Err(MdpError::Invalid(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                num_states * num_joint_actions
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MdpError::Invalid(format!("gamma {gamma} outside (0,1)")));
        }
        if horizon == 0 {
            return Err(MdpError::Invalid("horizon must be at least 1".into()));
        }
        if initial_state >= num_states {
            return Err(MdpError::Invalid(format!(
                "initial state {initial_state} out of range"
            )));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(MdpError::Invalid(format!("non-finite reward {r}")));
        }
        for (row_index, row) in transition.chunks(num_states).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(MdpError::Invalid(format!(
                    "transition row {row_index} has entries outside [0,1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MdpError::Invalid(format!(
                    "transition row {row_index} sums to {sum}"
                )));
            }
        }
        Ok(Self {
            num_states,
            action_space,
            num_joint_actions,
            transition,
            reward,
            gamma,
            initial_state,
            horizon,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_joint_actions(&self) -> usize {
        self.num_joint_actions
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_joint_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition_row(state, action)[next]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.num_joint_actions + action]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// True iff every transition row is one-hot.
    pub fn is_deterministic(&self) -> bool {
        self.transition
            .chunks(self.num_states)
            .all(|row| row.iter().filter(|&&p| p == 1.0).count() == 1)
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        let mut mdp = self.clone();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MdpError::Invalid(format!("gamma {gamma} outside (0,1)")));
        }
        mdp.gamma = gamma;
        Ok(mdp)
    }

    /// Optimal discounted action values by value iteration.
    pub fn optimal_q(&self, tol: f64, max_iters: usize) -> QTable {
        let mut q = QTable::zeros(self.num_states, self.num_joint_actions);
        for _ in 0..max_iters {
            let v: Vec<f64> = (0..self.num_states)
                .map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut next = QTable::zeros(self.num_states, self.num_joint_actions);
            for s in 0..self.num_states {
                for a in 0..self.num_joint_actions {
                    let future: f64 = self
                        .transition_row(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(p, v)| p * v)
                        .sum();
                    next.set(s, a, self.reward(s, a) + self.gamma * future);
                }
            }
            let residual = next.max_norm_diff(&q);
            q = next;
            if residual < tol {
                break;
            }
        }
        q
    }

    /// Deterministic stationary policy greedy w.r.t. [`Self::optimal_q`].
    pub fn optimal_policy(&self) -> JointPolicy {
        let q = self.optimal_q(1e-10, 100_000);
        let actions: Vec<usize> = (0..self.num_states)
            .map(|s| argmax_lowest(q.row(s)))
            .collect();
        JointPolicy::deterministic(self.action_space, self.num_states, &actions)
            .expect("greedy actions are in range")
    }
}

/// Index of the maximum entry, ties resolved towards the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Configuration of the two-state multi-agent MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdpSpec {
    pub num_agents: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_horizon() -> usize {
    100
}

fn default_gamma() -> f64 {
    0.99
}

impl MmdpSpec {
    pub fn new(num_agents: usize) -> Self {
        Self {
            num_agents,
            horizon: default_horizon(),
            gamma: default_gamma(),
        }
    }
}

/// Absorbing state of the MMDP.
pub const TAU1: usize = 0;
/// Start state of the MMDP.
pub const TAU2: usize = 1;

/// Builds the two-state MMDP.
///
/// All agents start in `TAU2`. From `TAU2` the team moves to `TAU1` when
/// `sum(a_i) <= n/2` and stays otherwise; `TAU1` is absorbing. The reward is 1
/// exactly when every agent picks action 0, in either state.
pub fn build_mmdp(spec: &MmdpSpec) -> Result<TabularMdp, MdpError> {
    if spec.num_agents == 0 {
        return Err(MdpError::NoAgents);
    }
    let space = ActionSpace::new(spec.num_agents, 2)?;
    let joint = space.num_joint_actions();
    let mut transition = vec![0.0; 2 * joint * 2];
    let mut reward = vec![0.0; 2 * joint];
    for a in 0..joint {
        let ones = a.count_ones() as usize;
        transition[(TAU1 * joint + a) * 2 + TAU1] = 1.0;
        let next = if 2 * ones <= spec.num_agents {
            TAU1
        } else {
            TAU2
        };
        transition[(TAU2 * joint + a) * 2 + next] = 1.0;
        if a == 0 {
            reward[TAU1 * joint + a] = 1.0;
            reward[TAU2 * joint + a] = 1.0;
        }
    }
    TabularMdp::new(2, space, transition, reward, spec.gamma, TAU2, spec.horizon)
}

/// Joint action distribution per state, `pi(a|s)` over joint actions.
///
/// Rows may be marked undefined (e.g. a behavior estimate at an unvisited state).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
    defined: Vec<bool>,
}

impl PolicyTable {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        Self::with_defined(num_states, num_actions, probs, vec![true; num_states])
    }

    pub fn with_defined(
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
        defined: Vec<bool>,
    ) -> Result<Self, MdpError> {
        if probs.len() != num_states * num_actions || defined.len() != num_states {
            return Err(MdpError::DimensionMismatch("policy table shape".into()));
        }
        for s in 0..num_states {
            if !defined[s] {
                continue;
            }
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(MdpError::InvalidPolicy(format!(
                    "row {s} has invalid entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MdpError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
            defined,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
            defined: vec![true; num_states],
        }
    }

    /// Greedy (one-hot) policy w.r.t. `q`, ties to the lowest action.
    pub fn greedy(q: &QTable) -> Self {
        let (ns, na) = (q.num_states(), q.num_actions());
        let mut probs = vec![0.0; ns * na];
        for s in 0..ns {
            probs[s * na + argmax_lowest(q.row(s))] = 1.0;
        }
        Self {
            num_states: ns,
            num_actions: na,
            probs,
            defined: vec![true; ns],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn is_defined(&self, state: usize) -> bool {
        self.defined[state]
    }

    pub fn row(&self, state: usize) -> Option<&[f64]> {
        self.defined[state]
            .then(|| &self.probs[state * self.num_actions..(state + 1) * self.num_actions])
    }

    pub fn prob(&self, state: usize, action: usize) -> Option<f64> {
        self.row(state).map(|r| r[action])
    }
}

/// Factored stochastic joint policy `pi(a|s) = prod_i pi^i(a^i|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    action_space: ActionSpace,
    num_states: usize,
    /// Per agent, row-major `[state][action]`.
    per_agent: Vec<Vec<f64>>,
}

impl JointPolicy {
    pub fn new(
        action_space: ActionSpace,
        num_states: usize,
        per_agent: Vec<Vec<f64>>,
    ) -> Result<Self, MdpError> {
        let k = action_space.actions_per_agent;
        if per_agent.len() != action_space.num_agents {
            return Err(MdpError::DimensionMismatch(format!(
                "{} agent tables for {} agents",
                per_agent.len(),
                action_space.num_agents
            )));
        }
        for (i, table) in per_agent.iter().enumerate() {
            if table.len() != num_states * k {
                return Err(MdpError::DimensionMismatch(format!(
                    "agent {i} table shape"
                )));
            }
            for (s, row) in table.chunks(k).enumerate() {
                if row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(MdpError::InvalidPolicy(format!(
                        "agent {i} state {s} has negative entries"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(MdpError::InvalidPolicy(format!(
                        "agent {i} state {s} sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self {
            action_space,
            num_states,
            per_agent,
        })
    }

    pub fn uniform(action_space: ActionSpace, num_states: usize) -> Self {
        let k = action_space.actions_per_agent;
        Self {
            action_space,
            num_states,
            per_agent: vec![vec![1.0 / k as f64; num_states * k]; action_space.num_agents],
        }
    }

    /// Every agent plays its component of `joint_actions[s]` with probability 1.
    pub fn deterministic(
        action_space: ActionSpace,
        num_states: usize,
        joint_actions: &[usize],
    ) -> Result<Self, MdpError> {
        if joint_actions.len() != num_states {
            return Err(MdpError::DimensionMismatch(
                "one joint action per state".into(),
            ));
        }
        let k = action_space.actions_per_agent;
        let mut per_agent = vec![vec![0.0; num_states * k]; action_space.num_agents];
        for (s, &joint) in joint_actions.iter().enumerate() {
            if joint >= action_space.num_joint_actions() {
                return Err(MdpError::DimensionMismatch(format!("joint action {joint}")));
            }
            for (i, table) in per_agent.iter_mut().enumerate() {
                table[s * k + action_space.component(joint, i)] = 1.0;
            }
        }
        Ok(Self {
            action_space,
            num_states,
            per_agent,
        })
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn agent_row(&self, agent: usize, state: usize) -> &[f64] {
        let k = self.action_space.actions_per_agent;
        &self.per_agent[agent][state * k..(state + 1) * k]
    }

    pub fn joint_prob(&self, state: usize, joint: usize) -> f64 {
        (0..self.action_space.num_agents)
            .map(|i| self.agent_row(i, state)[self.action_space.component(joint, i)])
            .product()
    }

    /// Dense joint table; rows are products of the per-agent rows.
    pub fn to_table(&self) -> PolicyTable {
        let na = self.action_space.num_joint_actions();
        let probs = (0..self.num_states)
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| self.joint_prob(s, a))
            .collect();
        PolicyTable {
            num_states: self.num_states,
            num_actions: na,
            probs,
            defined: vec![true; self.num_states],
        }
    }

    /// Draws one action per agent; returns the joint action and its probability.
    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> (usize, f64) {
        let actions: Vec<usize> = (0..self.action_space.num_agents)
            .map(|i| sample_index(rng, self.agent_row(i, state)))
            .collect();
        let joint = self.action_space.encode(&actions);
        (joint, self.joint_prob(state, joint))
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.action_space != mdp.action_space() || self.num_states != mdp.num_states() {
            return Err(MdpError::DimensionMismatch(format!(
                "policy over {:?} x {} states vs mdp over {:?} x {} states",
                self.action_space,
                self.num_states,
                mdp.action_space(),
                mdp.num_states()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Probability the behavior policy assigned to each taken joint action.
    pub behavior_probs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .rev()
            .fold(0.0, |acc, step| step.reward + gamma * acc)
    }

    /// Checks chaining, length and behavior-probability consistency.
    pub fn validate(&self, horizon: usize) -> Result<(), String> {
        if self.steps.len() > horizon {
            return Err(format!(
                "trajectory has {} steps, horizon is {horizon}",
                self.steps.len()
            ));
        }
        for (t, pair) in self.steps.windows(2).enumerate() {
            if pair[0].next_state != pair[1].state {
                return Err(format!(
                    "step {t} ends in {} but step {} starts in {}",
                    pair[0].next_state,
                    t + 1,
                    pair[1].state
                ));
            }
            if pair[0].done {
                return Err(format!("step {t} is terminal but the trajectory continues"));
            }
        }
        if let Some(probs) = &self.behavior_probs {
            if probs.len() != self.steps.len() {
                return Err("behavior_probs length differs from steps".into());
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err("behavior_probs outside [0,1]".into());
            }
        }
        Ok(())
    }
}

fn run_episode(mdp: &TabularMdp, policy: &JointPolicy, rng: &mut LabRng) -> Trajectory {
    let mut state = mdp.initial_state();
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut probs = Vec::with_capacity(mdp.horizon());
    for t in 0..mdp.horizon() {
        let (action, prob) = policy.sample(state, rng);
        let next_state = sample_index(rng, mdp.transition_row(state, action));
        steps.push(Step {
            state,
            action,
            reward: mdp.reward(state, action),
            next_state,
            done: t + 1 == mdp.horizon(),
        });
        probs.push(prob);
        state = next_state;
    }
    Trajectory {
        steps,
        behavior_probs: Some(probs),
    }
}

/// Samples `episodes` fixed-horizon trajectories under `policy`.
///
/// Episodes are drawn sequentially from one generator, so the first `k`
/// episodes of a longer rollout equal a `k`-episode rollout with the same seed.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &JointPolicy,
    seed: u64,
    episodes: usize,
) -> Result<Vec<Trajectory>, MdpError> {
    policy.check_against(mdp)?;
    let mut rng = seeded(seed);
    Ok((0..episodes)
        .map(|_| run_episode(mdp, policy, &mut rng))
        .collect())
}

/// Per episode, follows `expert` with probability `expert_fraction`, else `other`.
pub fn rollout_mixture(
    mdp: &TabularMdp,
    expert: &JointPolicy,
    other: &JointPolicy,
    expert_fraction: f64,
    seed: u64,
    episodes: usize,
) -> Result<Vec<Trajectory>, MdpError> {
    expert.check_against(mdp)?;
    other.check_against(mdp)?;
    if !(0.0..=1.0).contains(&expert_fraction) {
        return Err(MdpError::InvalidPolicy(format!(
            "expert fraction {expert_fraction} outside [0,1]"
        )));
    }
    let mut rng = seeded(seed);
    Ok((0..episodes)
        .map(|_| {
            let u: f64 = rng.random();
            let policy = if u < expert_fraction { expert } else { other };
            run_episode(mdp, policy, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
}

/// Mean discounted return from the initial state, with its standard error.
pub fn monte_carlo_value(
    mdp: &TabularMdp,
    policy: &JointPolicy,
    episodes: usize,
    seed: u64,
) -> Result<MonteCarloEstimate, MdpError> {
    if episodes == 0 {
        return Err(MdpError::NoEpisodes);
    }
    let returns: Vec<f64> = rollout(mdp, policy, seed, episodes)?
        .iter()
        .map(|t| t.discounted_return(mdp.gamma()))
        .collect();
    Ok(summarize_returns(&returns))
}

pub(crate) fn summarize_returns(returns: &[f64]) -> MonteCarloEstimate {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_error = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    MonteCarloEstimate {
        mean,
        std_error,
        episodes: returns.len(),
    }
}
