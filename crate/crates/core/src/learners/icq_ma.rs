use super::common::{BlockOptimizer, CriticGrad, CriticTables, MixedCritic, PolicyHeads, Replay};
use super::z::{behavior_log_z, log_mean_exp};
use super::{
    Algorithm, Checkpoint, Learner, LearnerConfig, LearnerError, StepLosses, TargetAudit, ZMode,
};
use crate::dataset::{BehaviorEstimate, OfflineDataset};
use crate::mdp::{ActionSpace, PolicyTable};
use crate::operators::{trace_returns, TraceStep};
use crate::rng::{derive_seed, seeded, LabRng};

/// Multi-agent implicit-constraint learner: mixed critic trained on
/// lambda-returns with importance ratios over seen pairs only, and
/// decentralized policies trained with per-agent weights
/// `exp(w^i Q^i / alpha) / Z^i`.
pub struct IcqMaLearner<'a> {
    ds: &'a OfflineDataset,
    config: LearnerConfig,
    space: ActionSpace,
    critic: MixedCritic,
    target: MixedCritic,
    target_tables: CriticTables,
    policies: PolicyHeads,
    critic_opt: BlockOptimizer,
    policy_opt: BlockOptimizer,
    behavior: BehaviorEstimate,
    joint_mu: PolicyTable,
    replay: Replay,
    steps: usize,
    frozen_weights: bool,
}

impl<'a> IcqMaLearner<'a> {
    pub fn new(ds: &'a OfflineDataset, config: LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        if ds.num_transitions() == 0 {
            return Err(LearnerError::EmptyDataset);
        }
        let space = ds.action_space();
        let ns = ds.num_states();
        let mut rng = seeded(derive_seed(config.seed, 1));
        let critic = MixedCritic::new(space, ns, config.hidden, &mut rng)?;
        let policies = PolicyHeads::new(
            space.num_agents,
            ns,
            space.actions_per_agent,
            config.hidden,
            &mut rng,
        )?;
        let target = critic.clone();
        let target_tables = target.evaluate()?;
        let critic_opt =
            BlockOptimizer::new(&critic.param_sizes(), config.critic_lr, config.grad_clip);
        let policy_opt =
            BlockOptimizer::new(&policies.param_sizes(), config.policy_lr, config.grad_clip);
        let behavior = ds.estimate_behavior()?;
        Ok(Self {
            ds,
            space,
            critic,
            target,
            target_tables,
            policies,
            critic_opt,
            policy_opt,
            joint_mu: behavior.joint_table(),
            behavior,
            replay: Replay::new(ds),
            steps: 0,
            frozen_weights: false,
            config,
        })
    }

    /// Pins every mixing weight `w^i` to zero for the rest of training.
    pub fn freeze_zero_mixer_weights(&mut self) -> Result<(), LearnerError> {
        self.critic.mixer.hyper_w.zero_output_layer();
        self.target.mixer.hyper_w.zero_output_layer();
        self.target_tables = self.target.evaluate()?;
        self.frozen_weights = true;
        Ok(())
    }

    /// `log Z(s)` under the target critic, summing over seen joint actions.
    fn target_log_z(&self, state: usize, audit: &mut TargetAudit) -> Result<f64, LearnerError> {
        let mu = self
            .joint_mu
            .row(state)
            .ok_or(LearnerError::UndefinedBehavior { state })?;
        let q: Vec<f64> = (0..mu.len())
            .map(|a| {
                if mu[a] > 0.0 {
                    audit.record(state, a);
                    self.target_tables.q_tot(state, a)
                } else {
                    0.0
                }
            })
            .collect();
        behavior_log_z(&q, mu, self.config.alpha).ok_or(LearnerError::UndefinedBehavior { state })
    }

    /// Softmax expectation of the target critic over seen joint actions, used
    /// when a trajectory ends without a terminal flag.
    fn target_seen_expectation(
        &self,
        state: usize,
        audit: &mut TargetAudit,
    ) -> Result<f64, LearnerError> {
        let log_z = self.target_log_z(state, audit)?;
        let mu = self
            .joint_mu
            .row(state)
            .ok_or(LearnerError::UndefinedBehavior { state })?;
        let alpha = self.config.alpha;
        Ok(mu
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(a, &m)| {
                let q = self.target_tables.q_tot(state, a);
                m * (q / alpha - log_z).exp() * q
            })
            .sum())
    }

    /// Lambda-return targets for one trajectory.
    fn trajectory_targets(
        &self,
        traj: usize,
        minibatch_log_z: f64,
        audit: &mut TargetAudit,
    ) -> Result<Vec<f64>, LearnerError> {
        let steps = &self.ds.trajectories()[traj].steps;
        let alpha = self.config.alpha;
        let mode = self.config.resolved_z_mode();
        let mut trace = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            let item = match steps.get(t + 1) {
                _ if step.done => TraceStep {
                    reward: step.reward,
                    done: true,
                    bootstrap_next: 0.0,
                    q_next_taken: None,
                    trace_next: 0.0,
                },
                Some(next) => {
                    audit.record(next.state, next.action);
                    let q_next = self.target_tables.q_tot(next.state, next.action);
                    let log_z = match mode {
                        ZMode::MinibatchSoftmax => minibatch_log_z,
                        ZMode::BehaviorModel => self.target_log_z(next.state, audit)?,
                    };
                    let rho = (q_next / alpha - log_z).exp();
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
                    bootstrap_next: self.target_seen_expectation(step.next_state, audit)?,
                    q_next_taken: None,
                    trace_next: 0.0,
                },
            };
            trace.push(item);
        }
        Ok(trace_returns(&trace, self.config.gamma, self.config.lambda))
    }

    /// Per-sample, per-agent policy weights `exp(w^i Q^i / alpha) / Z^i`
    /// under the current critic.
    pub fn policy_weights(
        &self,
        samples: &[(usize, usize)],
    ) -> Result<Vec<Vec<f64>>, LearnerError> {
        self.weights_with(&self.critic.evaluate()?, samples)
    }

    fn weights_with(
        &self,
        tables: &CriticTables,
        samples: &[(usize, usize)],
    ) -> Result<Vec<Vec<f64>>, LearnerError> {
        if samples.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        let n = self.space.num_agents;
        let k = self.space.actions_per_agent;
        let alpha = self.config.alpha;
        let scaled =
            |i: usize, s: usize, a: usize| tables.weights(s)[i] * tables.q_agent(i, s, a) / alpha;
        let mut out = vec![vec![0.0; n]; samples.len()];
        for i in 0..n {
            match self.config.resolved_z_mode() {
                ZMode::MinibatchSoftmax => {
                    let x: Vec<f64> = samples
                        .iter()
                        .map(|&(s, a)| scaled(i, s, self.space.component(a, i)))
                        .collect();
                    let log_z = log_mean_exp(&x);
                    for (row, xi) in out.iter_mut().zip(&x) {
                        row[i] = (xi - log_z).exp();
                    }
                }
                ZMode::BehaviorModel => {
                    for (row, &(s, a)) in out.iter_mut().zip(samples) {
                        let mu = self.behavior.agent(i, s)?;
                        let xs: Vec<f64> = (0..k).map(|b| scaled(i, s, b) * alpha).collect();
                        let log_z = behavior_log_z(&xs, &mu, alpha)
                            .ok_or(LearnerError::UndefinedBehavior { state: s })?;
                        row[i] = (scaled(i, s, self.space.component(a, i)) - log_z).exp();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Flattened policy-parameter gradient of the weighted likelihood loss on
    /// `samples`, with weights from the current critic or all ones.
    fn weighted_policy_gradient(
        &self,
        samples: &[(usize, usize)],
        uniform: bool,
    ) -> Result<(f64, Vec<Vec<f64>>), LearnerError> {
        let weights = if uniform {
            vec![vec![1.0; self.space.num_agents]; samples.len()]
        } else {
            self.policy_weights(samples)?
        };
        let (ptables, logp) = self.policies.evaluate()?;
        let k = self.space.actions_per_agent;
        let mut grad = self.policies.group.zero_grads();
        let scale = 1.0 / samples.len() as f64;
        let mut loss = 0.0;
        for (&(s, a), w) in samples.iter().zip(&weights) {
            for i in 0..self.space.num_agents {
                let ai = self.space.component(a, i);
                let coef = w[i] * scale;
                loss -= coef * logp[i][s * k + ai];
                PolicyHeads::add_nll(&mut grad[i], &logp[i], k, s, ai, coef);
            }
        }
        Ok((loss, self.policies.group.gradients(&ptables, &grad)?))
    }

    /// Gradient of the implicit-constraint policy loss on `samples`.
    pub fn policy_gradient(&self, samples: &[(usize, usize)]) -> Result<Vec<f64>, LearnerError> {
        Ok(self.weighted_policy_gradient(samples, false)?.1.concat())
    }

    /// Gradient of the plain negative log-likelihood on `samples`.
    pub fn bc_gradient(&self, samples: &[(usize, usize)]) -> Result<Vec<f64>, LearnerError> {
        Ok(self.weighted_policy_gradient(samples, true)?.1.concat())
    }

    /// Per-agent action probabilities at `state`.
    pub fn policy_probs(&self, agent: usize, state: usize) -> Result<Vec<f64>, LearnerError> {
        let (_, logp) = self.policies.evaluate()?;
        let k = self.space.actions_per_agent;
        Ok(logp[agent][state * k..(state + 1) * k]
            .iter()
            .map(|l| l.exp())
            .collect())
    }
}

impl Learner for IcqMaLearner<'_> {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError> {
        let trajs = self.replay.trajectories(self.config.batch_size, rng);
        let alpha = self.config.alpha;

        // minibatch normalizer over the batch's (s', a') pairs
        let next_q: Vec<f64> = trajs
            .iter()
            .flat_map(|&t| self.ds.trajectories()[t].steps.iter().skip(1))
            .map(|s| self.target_tables.q_tot(s.state, s.action) / alpha)
            .collect();
        let minibatch_log_z = if next_q.is_empty() {
            0.0
        } else {
            log_mean_exp(&next_q)
        };

        let tables = self.critic.evaluate()?;
        let mut grad = CriticGrad::zeros(&self.critic);
        let mut samples = Vec::new();
        let mut critic_loss = 0.0;
        let total: usize = trajs.iter().map(|&t| self.ds.trajectories()[t].len()).sum();
        let scale = 1.0 / total as f64;
        for &t in &trajs {
            let targets = self.trajectory_targets(t, minibatch_log_z, audit)?;
            for (step, y) in self.ds.trajectories()[t].steps.iter().zip(targets) {
                let diff = tables.q_tot(step.state, step.action) - y;
                critic_loss += 0.5 * diff * diff * scale;
                grad.add_q_tot(&tables, step.state, step.action, diff * scale);
                samples.push((step.state, step.action));
            }
        }

        let (policy_loss, policy_grads) = self.weighted_policy_gradient(&samples, false)?;
        let mut critic_grads = self.critic.gradients(&tables, &grad)?;
        if self.frozen_weights {
            let w_block = self.space.num_agents;
            critic_grads[w_block].fill(0.0);
        }
        self.critic_opt
            .step(self.critic.params_mut(), critic_grads)?;
        self.policy_opt
            .step(self.policies.params_mut(), policy_grads)?;

        self.steps += 1;
        if self.steps.is_multiple_of(self.config.target_update_d) {
            self.target.copy_from(&self.critic);
            self.target_tables = self.target.evaluate()?;
        }
        Ok(StepLosses {
            critic: Some(critic_loss),
            policy: Some(policy_loss),
        })
    }

    fn greedy_joint_actions(&self) -> Result<(Vec<usize>, u64), LearnerError> {
        let (_, logp) = self.policies.evaluate()?;
        let joint = (0..self.ds.num_states())
            .map(|s| {
                let actions: Vec<usize> = (0..self.space.num_agents)
                    .map(|i| self.policies.greedy(&logp, i, s))
                    .collect();
                self.space.encode(&actions)
            })
            .collect();
        Ok((joint, 0))
    }

    fn q_value(&self, state: usize, joint: usize) -> Result<Option<f64>, LearnerError> {
        Ok(Some(self.critic.evaluate()?.q_tot(state, joint)))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            algorithm: Algorithm::IcqMa,
            num_states: self.ds.num_states(),
            num_agents: self.space.num_agents,
            actions_per_agent: self.space.actions_per_agent,
            critic: self.critic.agents.nets.clone(),
            mixer: Some(self.critic.mixer.clone()),
            policies: self.policies.group.nets.clone(),
        }
    }
}
