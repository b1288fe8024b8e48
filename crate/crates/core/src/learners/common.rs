//! Shared machinery: per-state network tables, the mixed critic, policy heads,
//! replay sampling and greedy evaluation.
//!
//! Every environment handled here is tabular, so each network is evaluated once
//! per state per update and per-sample gradients are summed into per-state
//! output gradients before a single backward pass. This is exact, not an
//! approximation.

use rand::Rng;

use super::LearnerError;
use crate::approx::Activation;
use crate::approx::{
    clip_global_norm, one_hot, AdamState, DenseNet, ForwardCache, MixerCache, MixerGrads,
    MixerParams,
};
use crate::dataset::OfflineDataset;
use crate::mdp::{argmax_lowest, ActionSpace, Step};
use crate::rng::LabRng;

/// A group of networks sharing an input (the one-hot state) and an optimizer
/// schedule. Used for per-agent utilities, per-agent policies and joint heads.
#[derive(Debug, Clone)]
pub(crate) struct NetGroup {
    pub nets: Vec<DenseNet>,
    pub num_states: usize,
    pub outputs: usize,
}

/// Outputs of a [`NetGroup`] on every state.
#[derive(Debug, Clone)]
pub(crate) struct GroupTables {
    /// `[net][state * outputs + j]`.
    pub values: Vec<Vec<f64>>,
    caches: Vec<Vec<ForwardCache>>,
    outputs: usize,
}

impl GroupTables {
    pub fn row(&self, net: usize, state: usize) -> &[f64] {
        &self.values[net][state * self.outputs..(state + 1) * self.outputs]
    }

    pub fn get(&self, net: usize, state: usize, j: usize) -> f64 {
        self.values[net][state * self.outputs + j]
    }
}

impl NetGroup {
    pub fn new(
        count: usize,
        num_states: usize,
        outputs: usize,
        hidden: usize,
        rng: &mut LabRng,
    ) -> Result<Self, LearnerError> {
        let nets = (0..count)
            .map(|_| {
                let mut net = DenseNet::mlp(
                    &[num_states, hidden, outputs],
                    Activation::Relu,
                    Activation::Identity,
                    rng,
                )?;
                net.zero_output_layer();
                Ok(net)
            })
            .collect::<Result<Vec<_>, LearnerError>>()?;
        Ok(Self {
            nets,
            num_states,
            outputs,
        })
    }

    pub fn evaluate(&self) -> Result<GroupTables, LearnerError> {
        let mut values = Vec::with_capacity(self.nets.len());
        let mut caches = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            let mut v = Vec::with_capacity(self.num_states * self.outputs);
            let mut c = Vec::with_capacity(self.num_states);
            for s in 0..self.num_states {
                let cache = net.forward_cached(&one_hot(s, self.num_states))?;
                v.extend_from_slice(cache.output());
                c.push(cache);
            }
            values.push(v);
            caches.push(c);
        }
        Ok(GroupTables {
            values,
            caches,
            outputs: self.outputs,
        })
    }

    /// Parameter gradients for output gradients laid out like `tables.values`.
    pub fn gradients(
        &self,
        tables: &GroupTables,
        grad_values: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, LearnerError> {
        let mut out = Vec::with_capacity(self.nets.len());
        for (n, net) in self.nets.iter().enumerate() {
            let mut grads = vec![0.0; net.param_count()];
            for s in 0..self.num_states {
                let g = &grad_values[n][s * self.outputs..(s + 1) * self.outputs];
                if g.iter().all(|x| *x == 0.0) {
                    continue;
                }
                net.backward(&tables.caches[n][s], g, &mut grads)?;
            }
            out.push(grads);
        }
        Ok(out)
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.num_states * self.outputs]; self.nets.len()]
    }

    pub fn copy_from(&mut self, other: &NetGroup) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            a.copy_from(b);
        }
    }
}

/// One Adam state per parameter block with a shared global-norm clip.
#[derive(Debug, Clone)]
pub(crate) struct BlockOptimizer {
    states: Vec<AdamState>,
    clip: f64,
}

impl BlockOptimizer {
    pub fn new(sizes: &[usize], lr: f64, clip: f64) -> Self {
        Self {
            states: sizes.iter().map(|&n| AdamState::new(n, lr)).collect(),
            clip,
        }
    }

    /// Clips `grads` jointly and steps every block.
    pub fn step(
        &mut self,
        params: Vec<&mut [f64]>,
        mut grads: Vec<Vec<f64>>,
    ) -> Result<(), LearnerError> {
        {
            let mut views: Vec<&mut [f64]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
            clip_global_norm(&mut views, self.clip);
        }
        for ((state, p), g) in self.states.iter_mut().zip(params).zip(&grads) {
            state.step(p, g)?;
        }
        Ok(())
    }
}

/// Per-agent utilities combined by the monotonic mixer.
#[derive(Debug, Clone)]
pub(crate) struct MixedCritic {
    pub agents: NetGroup,
    pub mixer: MixerParams,
    pub space: ActionSpace,
}

/// Critic outputs on every state.
#[derive(Debug, Clone)]
pub(crate) struct CriticTables {
    pub agents: GroupTables,
    mixer: Vec<MixerCache>,
    space: ActionSpace,
}

impl CriticTables {
    pub fn q_agent(&self, agent: usize, state: usize, action: usize) -> f64 {
        self.agents.get(agent, state, action)
    }

    pub fn weights(&self, state: usize) -> &[f64] {
        &self.mixer[state].weights
    }

    pub fn bias(&self, state: usize) -> f64 {
        self.mixer[state].bias
    }

    pub fn q_tot(&self, state: usize, joint: usize) -> f64 {
        let w = self.weights(state);
        let mut total = self.bias(state);
        for (i, wi) in w.iter().enumerate() {
            total += wi * self.q_agent(i, state, self.space.component(joint, i));
        }
        total
    }

    /// `E_pi Q_tot(s, .)` for a factored policy; linear in each agent's row.
    pub fn expected_q_tot(&self, state: usize, agent_probs: &[&[f64]]) -> f64 {
        let mut total = self.bias(state);
        for (i, (wi, probs)) in self.weights(state).iter().zip(agent_probs).enumerate() {
            let row = self.agents.row(i, state);
            total += wi * row.iter().zip(*probs).map(|(q, p)| q * p).sum::<f64>();
        }
        total
    }
}

/// Output-space gradients of a loss with respect to the critic tables.
#[derive(Debug, Clone)]
pub(crate) struct CriticGrad {
    pub q: Vec<Vec<f64>>,
    /// `[state][agent]`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl CriticGrad {
    pub fn zeros(critic: &MixedCritic) -> Self {
        let n = critic.space.num_agents;
        Self {
            q: critic.agents.zero_grads(),
            w: vec![vec![0.0; n]; critic.agents.num_states],
            b: vec![0.0; critic.agents.num_states],
        }
    }

    /// Adds `g * d Q_tot(s, joint)`.
    pub fn add_q_tot(&mut self, tables: &CriticTables, state: usize, joint: usize, g: f64) {
        let k = tables.space.actions_per_agent;
        let w = tables.weights(state);
        for i in 0..tables.space.num_agents {
            let a = tables.space.component(joint, i);
            self.q[i][state * k + a] += g * w[i];
            self.w[state][i] += g * tables.q_agent(i, state, a);
        }
        self.b[state] += g;
    }
}

impl MixedCritic {
    pub fn new(
        space: ActionSpace,
        num_states: usize,
        hidden: usize,
        rng: &mut LabRng,
    ) -> Result<Self, LearnerError> {
        let agents = NetGroup::new(
            space.num_agents,
            num_states,
            space.actions_per_agent,
            hidden,
            rng,
        )?;
        let mut mixer = MixerParams::new(num_states, space.num_agents, MixerParams::HIDDEN, rng)?;
        // start from Q_tot = 0 everywhere, like the utilities
        mixer.hyper_b.zero_output_layer();
        Ok(Self {
            agents,
            mixer,
            space,
        })
    }

    pub fn evaluate(&self) -> Result<CriticTables, LearnerError> {
        let agents = self.agents.evaluate()?;
        let ns = self.agents.num_states;
        let mixer = (0..ns)
            .map(|s| self.mixer.forward_cached(&one_hot(s, ns)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CriticTables {
            agents,
            mixer,
            space: self.space,
        })
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.agents.nets.iter().map(|n| n.param_count()).collect();
        sizes.push(self.mixer.hyper_w.param_count());
        sizes.push(self.mixer.hyper_b.param_count());
        sizes
    }

    /// Parameter gradients in the block order of [`Self::param_sizes`].
    pub fn gradients(
        &self,
        tables: &CriticTables,
        grad: &CriticGrad,
    ) -> Result<Vec<Vec<f64>>, LearnerError> {
        let mut blocks = self.agents.gradients(&tables.agents, &grad.q)?;
        let mut mixer_grads = MixerGrads::zeros(&self.mixer);
        for (s, cache) in tables.mixer.iter().enumerate() {
            if grad.b[s] == 0.0 && grad.w[s].iter().all(|g| *g == 0.0) {
                continue;
            }
            self.mixer
                .backward(cache, &grad.w[s], grad.b[s], &mut mixer_grads)?;
        }
        blocks.push(mixer_grads.hyper_w);
        blocks.push(mixer_grads.hyper_b);
        Ok(blocks)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .agents
            .nets
            .iter_mut()
            .map(|n| n.params_mut())
            .collect();
        out.push(self.mixer.hyper_w.params_mut());
        out.push(self.mixer.hyper_b.params_mut());
        out
    }

    pub fn copy_from(&mut self, other: &MixedCritic) {
        self.agents.copy_from(&other.agents);
        self.mixer.copy_from(&other.mixer);
    }
}

/// Row-wise log-softmax of a logits table with `k` columns.
pub(crate) fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

/// Per-agent categorical policies over the agent's own observation.
#[derive(Debug, Clone)]
pub(crate) struct PolicyHeads {
    pub group: NetGroup,
}

impl PolicyHeads {
    pub fn new(
        count: usize,
        num_states: usize,
        actions: usize,
        hidden: usize,
        rng: &mut LabRng,
    ) -> Result<Self, LearnerError> {
        Ok(Self {
            group: NetGroup::new(count, num_states, actions, hidden, rng)?,
        })
    }

    /// Log-probabilities `[head][state * k + a]` and the forward tables.
    pub fn evaluate(&self) -> Result<(GroupTables, Vec<Vec<f64>>), LearnerError> {
        let tables = self.group.evaluate()?;
        let k = self.group.outputs;
        let logp = tables
            .values
            .iter()
            .map(|v| log_softmax_rows(v, k))
            .collect();
        Ok((tables, logp))
    }

    /// Accumulates the logit gradient of `-coef * log pi(a|s)` for one head.
    pub fn add_nll(
        grad: &mut [f64],
        logp: &[f64],
        k: usize,
        state: usize,
        action: usize,
        coef: f64,
    ) {
        for j in 0..k {
            let p = logp[state * k + j].exp();
            let indicator = if j == action { 1.0 } else { 0.0 };
            grad[state * k + j] += coef * (p - indicator);
        }
    }

    pub fn greedy(&self, logp: &[Vec<f64>], head: usize, state: usize) -> usize {
        let k = self.group.outputs;
        argmax_lowest(&logp[head][state * k..(state + 1) * k])
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.group.nets.iter_mut().map(|n| n.params_mut()).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.group.nets.iter().map(|n| n.param_count()).collect()
    }
}

/// Uniform replay over transitions or whole trajectories.
#[derive(Debug, Clone)]
pub(crate) struct Replay {
    index: Vec<(usize, usize)>,
    num_trajectories: usize,
}

/// A transition with the next action of the same trajectory, when there is one.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sample<'a> {
    pub step: &'a Step,
    pub next: Option<&'a Step>,
}

impl Replay {
    pub fn new(ds: &OfflineDataset) -> Self {
        let mut index = Vec::with_capacity(ds.num_transitions());
        for (t, traj) in ds.trajectories().iter().enumerate() {
            for i in 0..traj.steps.len() {
                index.push((t, i));
            }
        }
        Self {
            index,
            num_trajectories: ds.trajectories().len(),
        }
    }

    pub fn transitions<'a>(
        &self,
        ds: &'a OfflineDataset,
        batch: usize,
        rng: &mut LabRng,
    ) -> Vec<Sample<'a>> {
        (0..batch)
            .map(|_| {
                let (t, i) = self.index[rng.random_range(0..self.index.len())];
                let steps = &ds.trajectories()[t].steps;
                Sample {
                    step: &steps[i],
                    next: steps.get(i + 1),
                }
            })
            .collect()
    }

    pub fn trajectories(&self, batch: usize, rng: &mut LabRng) -> Vec<usize> {
        (0..batch)
            .map(|_| rng.random_range(0..self.num_trajectories))
            .collect()
    }
}
