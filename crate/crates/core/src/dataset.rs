//! Offline datasets and the statistics every learner and analyzer derives from them.
//!
//! Datasets persist as JSON Lines. Line 1 is a header object, every following
//! line is one trajectory:
//!
//! ```text
//! {"num_agents":2,"action_space":2,"num_states":2,"initial_state":1,"gamma":0.99,"horizon":100}
//! {"steps":[[1,0,1.0,0,false],...],"behavior_probs":[0.25,...]}
//! ```
//!
//! Each step is `[state, joint_action, reward, next_state, done]`. Counts are
//! rebuilt on load rather than stored.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{
    build_mmdp, rollout, ActionSpace, JointPolicy, MdpError, MmdpSpec, PolicyTable, Step,
    TabularMdp, Trajectory,
};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing header")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: header mismatch: {message}")]
    HeaderMismatch { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("expert count {expert} exceeds trajectory count {total}")]
    ExpertCount { expert: usize, total: usize },
    #[error("trajectory {index}: {message}")]
    InvalidTrajectory { index: usize, message: String },
    #[error("state {0} was never visited in the dataset")]
    UndefinedState(usize),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// First line of a dataset file; fixes the shape every trajectory must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub num_agents: usize,
    /// Actions available to each agent.
    pub action_space: usize,
    pub num_states: usize,
    pub initial_state: usize,
    pub gamma: f64,
    pub horizon: usize,
}

impl DatasetHeader {
    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        let space = mdp.action_space();
        Self {
            num_agents: space.num_agents,
            action_space: space.actions_per_agent,
            num_states: mdp.num_states(),
            initial_state: mdp.initial_state(),
            gamma: mdp.gamma(),
            horizon: mdp.horizon(),
        }
    }

    pub fn joint_space(&self) -> Result<ActionSpace, MdpError> {
        ActionSpace::new(self.num_agents, self.action_space)
    }

    fn validate(&self) -> Result<ActionSpace, String> {
        let space = self.joint_space().map_err(|e| e.to_string())?;
        if self.num_states == 0 {
            return Err("num_states must be positive".into());
        }
        if self.initial_state >= self.num_states {
            return Err(format!("initial_state {} out of range", self.initial_state));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma {} outside (0,1)", self.gamma));
        }
        if self.horizon == 0 {
            return Err("horizon must be positive".into());
        }
        if self
            .num_states
            .checked_mul(space.num_joint_actions())
            .and_then(|p| p.checked_mul(self.num_states))
            .is_none_or(|p| p > 1 << 26)
        {
            return Err("state/action tables too large".into());
        }
        Ok(space)
    }
}

/// One JSONL trajectory line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    steps: Vec<(usize, usize, f64, usize, bool)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    behavior_probs: Option<Vec<f64>>,
}

/// Ordered trajectories plus visit counts `N(s,a)` and `N(s,a,s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    header: DatasetHeader,
    space: ActionSpace,
    trajectories: Vec<Trajectory>,
    pair_counts: Vec<u64>,
    transition_counts: Vec<u64>,
}

impl OfflineDataset {
    pub fn new(header: DatasetHeader, trajectories: Vec<Trajectory>) -> Result<Self, DatasetError> {
        let space = header
            .validate()
            .map_err(|message| DatasetError::HeaderMismatch { line: 1, message })?;
        let na = space.num_joint_actions();
        let ns = header.num_states;
        let mut pair_counts = vec![0u64; ns * na];
        let mut transition_counts = vec![0u64; ns * na * ns];
        for (index, trajectory) in trajectories.iter().enumerate() {
            check_trajectory(&header, na, trajectory)
                .map_err(|message| DatasetError::InvalidTrajectory { index, message })?;
            for step in &trajectory.steps {
                pair_counts[step.state * na + step.action] += 1;
                transition_counts[(step.state * na + step.action) * ns + step.next_state] += 1;
            }
        }
        Ok(Self {
            header,
            space,
            trajectories,
            pair_counts,
            transition_counts,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    pub fn num_agents(&self) -> usize {
        self.header.num_agents
    }

    pub fn num_states(&self) -> usize {
        self.header.num_states
    }

    pub fn num_joint_actions(&self) -> usize {
        self.space.num_joint_actions()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn is_empty(&self) -> bool {
        self.num_transitions() == 0
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// All steps in trajectory order.
    pub fn transitions(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    pub fn pair_count(&self, state: usize, action: usize) -> u64 {
        self.pair_counts[state * self.num_joint_actions() + action]
    }

    pub fn transition_count(&self, state: usize, action: usize, next: usize) -> u64 {
        let ns = self.num_states();
        self.transition_counts[(state * self.num_joint_actions() + action) * ns + next]
    }

    pub fn state_count(&self, state: usize) -> u64 {
        let na = self.num_joint_actions();
        self.pair_counts[state * na..(state + 1) * na].iter().sum()
    }

    /// `seen[s * |A| + a]` is true iff the pair occurs in the dataset.
    pub fn seen_mask(&self) -> Vec<bool> {
        self.pair_counts.iter().map(|&c| c > 0).collect()
    }

    pub fn num_seen_pairs(&self) -> usize {
        self.pair_counts.iter().filter(|&&c| c > 0).count()
    }

    /// Fraction of all (state, joint action) pairs that occur in the data.
    pub fn seen_fraction(&self) -> f64 {
        self.num_seen_pairs() as f64 / self.pair_counts.len() as f64
    }

    pub fn empirical_mdp(&self) -> Result<EmpiricalMdp, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        let ns = self.num_states();
        let na = self.num_joint_actions();
        let mut transition = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
                let total = self.pair_count(s, a);
                if total == 0 {
                    row[self.header.initial_state] = 1.0;
                } else {
                    for (next, p) in row.iter_mut().enumerate() {
                        *p = self.transition_count(s, a, next) as f64 / total as f64;
                    }
                }
            }
        }
        Ok(EmpiricalMdp {
            num_states: ns,
            num_actions: na,
            transition,
            seen_mask: self.seen_mask(),
        })
    }

    pub fn estimate_behavior(&self) -> Result<BehaviorEstimate, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        let ns = self.num_states();
        let na = self.num_joint_actions();
        let k = self.space.actions_per_agent;
        let mut agent_counts = vec![vec![0u64; ns * k]; self.num_agents()];
        for s in 0..ns {
            for a in 0..na {
                let c = self.pair_count(s, a);
                if c == 0 {
                    continue;
                }
                for (i, counts) in agent_counts.iter_mut().enumerate() {
                    counts[s * k + self.space.component(a, i)] += c;
                }
            }
        }
        let state_counts = (0..ns).map(|s| self.state_count(s)).collect();
        Ok(BehaviorEstimate {
            space: self.space,
            num_states: ns,
            joint_counts: self.pair_counts.clone(),
            agent_counts,
            state_counts,
            support_threshold: 0.3,
        })
    }

    /// Serializes to the JSON Lines format described at module level.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for trajectory in &self.trajectories {
            let line = TrajectoryLine {
                steps: trajectory
                    .steps
                    .iter()
                    .map(|s| (s.state, s.action, s.reward, s.next_state, s.done))
                    .collect(),
                behavior_probs: trajectory.behavior_probs.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("trajectory serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses the JSON Lines format; errors carry 1-based line numbers.
    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (header_index, header_line) = lines.next().ok_or(DatasetError::MissingHeader)?;
        if header_index != 0 {
            return Err(DatasetError::MissingHeader);
        }
        let header: DatasetHeader =
            serde_json::from_str(header_line).map_err(|e| DatasetError::Parse {
                line: 1,
                message: format!("invalid header: {e}"),
            })?;
        let space = header
            .validate()
            .map_err(|message| DatasetError::HeaderMismatch { line: 1, message })?;
        let na = space.num_joint_actions();
        let mut trajectories = Vec::new();
        for (index, line) in lines {
            let line_no = index + 1;
            let parsed: TrajectoryLine =
                serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let trajectory = Trajectory {
                steps: parsed
                    .steps
                    .into_iter()
                    .map(|(state, action, reward, next_state, done)| Step {
                        state,
                        action,
                        reward,
                        next_state,
                        done,
                    })
                    .collect(),
                behavior_probs: parsed.behavior_probs,
            };
            check_trajectory(&header, na, &trajectory).map_err(|message| {
                DatasetError::HeaderMismatch {
                    line: line_no,
                    message,
                }
            })?;
            trajectories.push(trajectory);
        }
        Self::new(header, trajectories)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut file = BufWriter::new(fs::File::create(path)?);
        file.write_all(self.to_jsonl().as_bytes())?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// Loads a dataset and checks its header against the expected environment.
    pub fn load_for(
        path: impl AsRef<Path>,
        expected: &DatasetHeader,
    ) -> Result<Self, DatasetError> {
        let ds = Self::load(path)?;
        ds.check_header(expected)?;
        Ok(ds)
    }

    pub fn check_header(&self, expected: &DatasetHeader) -> Result<(), DatasetError> {
        if self.header != *expected {
            return Err(DatasetError::HeaderMismatch {
                line: 1,
                message: format!("expected {expected:?}, found {:?}", self.header),
            });
        }
        Ok(())
    }
}

fn check_trajectory(
    header: &DatasetHeader,
    na: usize,
    trajectory: &Trajectory,
) -> Result<(), String> {
    for (t, step) in trajectory.steps.iter().enumerate() {
        if step.state >= header.num_states || step.next_state >= header.num_states {
            return Err(format!(
                "step {t} references a state outside 0..{}",
                header.num_states
            ));
        }
        if step.action >= na {
            return Err(format!(
                "step {t} joint action {} outside 0..{na}",
                step.action
            ));
        }
        if !step.reward.is_finite() {
            return Err(format!("step {t} has a non-finite reward"));
        }
    }
    trajectory.validate(header.horizon)
}

/// Transition model estimated from counts, with the seen/unseen partition.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    seen_mask: Vec<bool>,
}

impl EmpiricalMdp {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `P_B(.|s,a)`; unseen pairs move to the initial state with probability 1.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn is_seen(&self, state: usize, action: usize) -> bool {
        self.seen_mask[state * self.num_actions + action]
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen_mask
    }

    /// Rebuilds a full tabular MDP using these dynamics and `reference`'s rewards.
    pub fn to_tabular(&self, reference: &TabularMdp) -> Result<TabularMdp, MdpError> {
        TabularMdp::new(
            self.num_states,
            reference.action_space(),
            self.transition.clone(),
            (0..self.num_states)
                .flat_map(|s| (0..self.num_actions).map(move |a| (s, a)))
                .map(|(s, a)| reference.reward(s, a))
                .collect(),
            reference.gamma(),
            reference.initial_state(),
            reference.horizon(),
        )
    }
}

/// Count-normalized behavior policy, joint and per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEstimate {
    space: ActionSpace,
    num_states: usize,
    joint_counts: Vec<u64>,
    /// Per agent, `[state][action]` marginal counts.
    agent_counts: Vec<Vec<u64>>,
    state_counts: Vec<u64>,
    /// Familiarity threshold used by batch-constrained learners.
    pub support_threshold: f64,
}

impl BehaviorEstimate {
    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_joint_actions(&self) -> usize {
        self.space.num_joint_actions()
    }

    pub fn is_defined(&self, state: usize) -> bool {
        self.state_counts[state] > 0
    }

    pub fn state_count(&self, state: usize) -> u64 {
        self.state_counts[state]
    }

    /// `mu(.|s)` over joint actions.
    pub fn joint(&self, state: usize) -> Result<Vec<f64>, DatasetError> {
        let total = self.defined_total(state)?;
        let na = self.num_joint_actions();
        Ok(self.joint_counts[state * na..(state + 1) * na]
            .iter()
            .map(|&c| c as f64 / total)
            .collect())
    }

    /// `mu^i(.|s)` over the actions of one agent.
    pub fn agent(&self, agent: usize, state: usize) -> Result<Vec<f64>, DatasetError> {
        let total = self.defined_total(state)?;
        let k = self.space.actions_per_agent;
        Ok(self.agent_counts[agent][state * k..(state + 1) * k]
            .iter()
            .map(|&c| c as f64 / total)
            .collect())
    }

    pub fn agent_counts(&self, agent: usize, state: usize) -> &[u64] {
        let k = self.space.actions_per_agent;
        &self.agent_counts[agent][state * k..(state + 1) * k]
    }

    /// Joint table with undefined rows for unvisited states.
    pub fn joint_table(&self) -> PolicyTable {
        let na = self.num_joint_actions();
        let mut probs = vec![0.0; self.num_states * na];
        let mut defined = vec![false; self.num_states];
        for s in 0..self.num_states {
            if let Ok(row) = self.joint(s) {
                probs[s * na..(s + 1) * na].copy_from_slice(&row);
                defined[s] = true;
            }
        }
        PolicyTable::with_defined(self.num_states, na, probs, defined)
            .expect("count-normalized rows are distributions")
    }

    /// Per-agent actions whose count ratio to the modal action reaches `zeta`.
    ///
    /// An action is unfamiliar when `count / max_count < zeta`; the modal
    /// action always survives, so `zeta = 1` keeps only the most frequent ones
    /// and `zeta = 0` masks nothing.
    pub fn familiar_actions(&self, agent: usize, state: usize, zeta: f64) -> Vec<bool> {
        let counts = self.agent_counts(agent, state);
        let max = counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return vec![true; counts.len()];
        }
        counts
            .iter()
            .map(|&c| (c as f64 / max as f64) >= zeta)
            .collect()
    }

    fn defined_total(&self, state: usize) -> Result<f64, DatasetError> {
        if state >= self.num_states || self.state_counts[state] == 0 {
            return Err(DatasetError::UndefinedState(state));
        }
        Ok(self.state_counts[state] as f64)
    }
}

/// Generates the controlled MMDP buffer: `expert_count` optimal trajectories and
/// the rest from the uniform joint policy, shuffled.
pub fn collect_mmdp_dataset(
    spec: &MmdpSpec,
    num_trajectories: usize,
    expert_count: usize,
    seed: u64,
) -> Result<OfflineDataset, DatasetError> {
    collect_dataset(&build_mmdp(spec)?, num_trajectories, expert_count, seed)
}

/// Same expert/uniform mixture on an arbitrary tabular MDP, with the optimal
/// policy from value iteration as the expert.
pub fn collect_dataset(
    mdp: &TabularMdp,
    num_trajectories: usize,
    expert_count: usize,
    seed: u64,
) -> Result<OfflineDataset, DatasetError> {
    if expert_count > num_trajectories {
        return Err(DatasetError::ExpertCount {
            expert: expert_count,
            total: num_trajectories,
        });
    }
    let expert = mdp.optimal_policy();
    let uniform = JointPolicy::uniform(mdp.action_space(), mdp.num_states());
    let mut trajectories = rollout(mdp, &expert, derive_seed(seed, 0), expert_count)?;
    trajectories.extend(rollout(
        mdp,
        &uniform,
        derive_seed(seed, 1),
        num_trajectories - expert_count,
    )?);
    trajectories.shuffle(&mut seeded(derive_seed(seed, 2)));
    OfflineDataset::new(DatasetHeader::for_mdp(mdp), trajectories)
}
