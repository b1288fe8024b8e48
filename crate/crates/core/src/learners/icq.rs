use super::common::{BlockOptimizer, GroupTables, NetGroup, PolicyHeads, Replay, Sample};
use super::z::{behavior_log_z, compute_z};
use super::{
    Algorithm, Checkpoint, Learner, LearnerConfig, LearnerError, StepLosses, TargetAudit, ZMode,
};
use crate::dataset::OfflineDataset;
use crate::mdp::{argmax_lowest, PolicyTable};
use crate::qtable::QTable;
use crate::rng::{derive_seed, seeded, LabRng};

/// Implicit-constraint learner treating the joint action as one action.
pub struct IcqLearner<'a> {
    ds: &'a OfflineDataset,
    config: LearnerConfig,
    num_actions: usize,
    critic: NetGroup,
    target: NetGroup,
    target_q: QTable,
    policy: PolicyHeads,
    critic_opt: BlockOptimizer,
    policy_opt: BlockOptimizer,
    mu: PolicyTable,
    replay: Replay,
    steps: usize,
}

fn table_of(tables: &GroupTables, num_states: usize, num_actions: usize) -> QTable {
    QTable::from_values(num_states, num_actions, tables.values[0].clone())
}

impl<'a> IcqLearner<'a> {
    pub fn new(ds: &'a OfflineDataset, config: LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        if ds.num_transitions() == 0 {
            return Err(LearnerError::EmptyDataset);
        }
        let ns = ds.num_states();
        let na = ds.num_joint_actions();
        let mut rng = seeded(derive_seed(config.seed, 1));
        let critic = NetGroup::new(1, ns, na, config.hidden, &mut rng)?;
        let policy = PolicyHeads::new(1, ns, na, config.hidden, &mut rng)?;
        let target = critic.clone();
        let target_q = table_of(&target.evaluate()?, ns, na);
        Ok(Self {
            ds,
            num_actions: na,
            critic_opt: BlockOptimizer::new(
                &[critic.nets[0].param_count()],
                config.critic_lr,
                config.grad_clip,
            ),
            policy_opt: BlockOptimizer::new(
                &policy.param_sizes(),
                config.policy_lr,
                config.grad_clip,
            ),
            critic,
            target,
            target_q,
            policy,
            mu: ds.estimate_behavior()?.joint_table(),
            replay: Replay::new(ds),
            steps: 0,
            config,
        })
    }

    pub fn critic_table(&self) -> Result<QTable, LearnerError> {
        Ok(table_of(
            &self.critic.evaluate()?,
            self.ds.num_states(),
            self.num_actions,
        ))
    }

    fn record_seen(&self, state: usize, audit: &mut TargetAudit) {
        if let Some(row) = self.mu.row(state) {
            for (a, &m) in row.iter().enumerate() {
                if m > 0.0 {
                    audit.record(state, a);
                }
            }
        }
    }

    fn targets(&self, batch: &[Sample], audit: &mut TargetAudit) -> Result<Vec<f64>, LearnerError> {
        let alpha = self.config.alpha;
        let mode = self.config.resolved_z_mode();
        let next_pairs: Vec<(usize, usize)> = batch
            .iter()
            .filter(|s| !s.step.done)
            .filter_map(|s| s.next.map(|n| (n.state, n.action)))
            .collect();
        let z = if next_pairs.is_empty() {
            None
        } else {
            if mode == ZMode::BehaviorModel {
                for &(s, _) in &next_pairs {
                    self.record_seen(s, audit);
                }
            }
            Some(compute_z(
                &next_pairs,
                &self.target_q,
                Some(&self.mu),
                alpha,
                mode,
            )?)
        };
        let mut j = 0;
        let mut out = Vec::with_capacity(batch.len());
        for sample in batch {
            let step = sample.step;
            let y = if step.done {
                step.reward
            } else if let Some(next) = sample.next {
                audit.record(next.state, next.action);
                let q = self.target_q.get(next.state, next.action);
                let rho = z.as_ref().expect("pairs exist").rho(j, q, alpha);
                j += 1;
                step.reward + self.config.gamma * rho * q
            } else {
                // truncated: softmax expectation over seen actions only
                let s = step.next_state;
                self.record_seen(s, audit);
                let row = self
                    .mu
                    .row(s)
                    .ok_or(LearnerError::UndefinedBehavior { state: s })?;
                let q = self.target_q.row(s);
                let log_z = behavior_log_z(q, row, alpha)
                    .ok_or(LearnerError::UndefinedBehavior { state: s })?;
                let v: f64 = row
                    .iter()
                    .zip(q)
                    .filter(|(m, _)| **m > 0.0)
                    .map(|(m, q)| m * (q / alpha - log_z).exp() * q)
                    .sum();
                step.reward + self.config.gamma * v
            };
            out.push(y);
        }
        Ok(out)
    }

    fn weighted_policy_gradient(
        &self,
        samples: &[(usize, usize)],
        uniform: bool,
    ) -> Result<(f64, Vec<Vec<f64>>), LearnerError> {
        if samples.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        let alpha = self.config.alpha;
        let weights: Vec<f64> = if uniform {
            vec![1.0; samples.len()]
        } else {
            let q = self.critic_table()?;
            let mode = self.config.resolved_z_mode();
            let z = compute_z(samples, &q, Some(&self.mu), alpha, mode)?;
            samples
                .iter()
                .enumerate()
                .map(|(i, &(s, a))| z.rho(i, q.get(s, a), alpha))
                .collect()
        };
        let (ptables, logp) = self.policy.evaluate()?;
        let k = self.num_actions;
        let scale = 1.0 / samples.len() as f64;
        let mut grad = self.policy.group.zero_grads();
        let mut loss = 0.0;
        for (&(s, a), w) in samples.iter().zip(&weights) {
            loss -= w * scale * logp[0][s * k + a];
            PolicyHeads::add_nll(&mut grad[0], &logp[0], k, s, a, w * scale);
        }
        Ok((loss, self.policy.group.gradients(&ptables, &grad)?))
    }

    pub fn policy_gradient(&self, samples: &[(usize, usize)]) -> Result<Vec<f64>, LearnerError> {
        Ok(self.weighted_policy_gradient(samples, false)?.1.concat())
    }

    pub fn bc_gradient(&self, samples: &[(usize, usize)]) -> Result<Vec<f64>, LearnerError> {
        Ok(self.weighted_policy_gradient(samples, true)?.1.concat())
    }
}

impl Learner for IcqLearner<'_> {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError> {
        let batch = self
            .replay
            .transitions(self.ds, self.config.batch_size, rng);
        let targets = self.targets(&batch, audit)?;
        let tables = self.critic.evaluate()?;
        let k = self.num_actions;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = self.critic.zero_grads();
        let mut loss = 0.0;
        for (sample, y) in batch.iter().zip(&targets) {
            let (s, a) = (sample.step.state, sample.step.action);
            let diff = tables.get(0, s, a) - y;
            loss += 0.5 * diff * diff * scale;
            grad[0][s * k + a] += diff * scale;
        }
        let critic_grads = self.critic.gradients(&tables, &grad)?;
        let pairs: Vec<(usize, usize)> = batch
            .iter()
            .map(|s| (s.step.state, s.step.action))
            .collect();
        let (policy_loss, policy_grads) = self.weighted_policy_gradient(&pairs, false)?;
        self.critic_opt.step(
            self.critic
                .nets
                .iter_mut()
                .map(|n| n.params_mut())
                .collect(),
            critic_grads,
        )?;
        self.policy_opt
            .step(self.policy.params_mut(), policy_grads)?;
        self.steps += 1;
        if self.steps.is_multiple_of(self.config.target_update_d) {
            self.target.copy_from(&self.critic);
            self.target_q = table_of(&self.target.evaluate()?, self.ds.num_states(), k);
        }
        Ok(StepLosses {
            critic: Some(loss),
            policy: Some(policy_loss),
        })
    }

    fn greedy_joint_actions(&self) -> Result<(Vec<usize>, u64), LearnerError> {
        let (_, logp) = self.policy.evaluate()?;
        let k = self.num_actions;
        let joint = (0..self.ds.num_states())
            .map(|s| argmax_lowest(&logp[0][s * k..(s + 1) * k]))
            .collect();
        Ok((joint, 0))
    }

    fn q_value(&self, state: usize, joint: usize) -> Result<Option<f64>, LearnerError> {
        Ok(Some(self.critic.evaluate()?.get(0, state, joint)))
    }

    fn checkpoint(&self) -> Checkpoint {
        let space = self.ds.action_space();
        Checkpoint {
            algorithm: Algorithm::Icq,
            num_states: self.ds.num_states(),
            num_agents: space.num_agents,
            actions_per_agent: space.actions_per_agent,
            critic: self.critic.nets.clone(),
            mixer: None,
            policies: self.policy.group.nets.clone(),
        }
    }
}
