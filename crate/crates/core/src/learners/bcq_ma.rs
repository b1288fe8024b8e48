use super::common::{BlockOptimizer, CriticGrad, CriticTables, MixedCritic, Replay};
use super::{Algorithm, Checkpoint, Learner, LearnerConfig, LearnerError, StepLosses, TargetAudit};
use crate::dataset::{BehaviorEstimate, OfflineDataset};
use crate::mdp::ActionSpace;
use crate::rng::{derive_seed, seeded, LabRng};

/// Batch-constrained baseline with the mixer: each agent maximizes its own
/// utility over the actions its count-based generator deems familiar.
pub struct BcqMaLearner<'a> {
    ds: &'a OfflineDataset,
    config: LearnerConfig,
    space: ActionSpace,
    critic: MixedCritic,
    target: MixedCritic,
    target_tables: CriticTables,
    critic_opt: BlockOptimizer,
    /// `[agent][state * k + a]`.
    familiar: Vec<Vec<bool>>,
    /// States where every agent had no counts to mask with.
    unvisited: Vec<bool>,
    replay: Replay,
    steps: usize,
}

/// Index of the largest masked entry; ties go to the lowest index. With an
/// empty mask the lowest index wins.
fn masked_argmax(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (a, (&v, &ok)) in values.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| v > values[b]) {
            best = Some(a);
        }
    }
    best.unwrap_or(0)
}

impl<'a> BcqMaLearner<'a> {
    pub fn new(ds: &'a OfflineDataset, config: LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        if ds.num_transitions() == 0 {
            return Err(LearnerError::EmptyDataset);
        }
        let space = ds.action_space();
        let ns = ds.num_states();
        let mut rng = seeded(derive_seed(config.seed, 1));
        let critic = MixedCritic::new(space, ns, config.hidden, &mut rng)?;
        let target = critic.clone();
        let target_tables = target.evaluate()?;
        let behavior: BehaviorEstimate = ds.estimate_behavior()?;
        let familiar = (0..space.num_agents)
            .map(|i| {
                (0..ns)
                    .flat_map(|s| behavior.familiar_actions(i, s, config.zeta))
                    .collect()
            })
            .collect();
        let unvisited = (0..ns).map(|s| !behavior.is_defined(s)).collect();
        Ok(Self {
            ds,
            space,
            critic_opt: BlockOptimizer::new(
                &critic.param_sizes(),
                config.critic_lr,
                config.grad_clip,
            ),
            critic,
            target,
            target_tables,
            familiar,
            unvisited,
            replay: Replay::new(ds),
            steps: 0,
            config,
        })
    }

    pub fn familiar(&self, agent: usize, state: usize) -> &[bool] {
        let k = self.space.actions_per_agent;
        &self.familiar[agent][state * k..(state + 1) * k]
    }

    /// Per-agent masked greedy actions at `state` under `tables`.
    fn masked_greedy(&self, tables: &CriticTables, state: usize) -> Vec<usize> {
        (0..self.space.num_agents)
            .map(|i| masked_argmax(tables.agents.row(i, state), self.familiar(i, state)))
            .collect()
    }

    /// `sum_i w'^i max_{familiar} Q'^i + b'` at `state`.
    fn target_value(&self, state: usize, audit: &mut TargetAudit) -> f64 {
        let actions = self.masked_greedy(&self.target_tables, state);
        let joint = self.space.encode(&actions);
        audit.record(state, joint);
        self.target_tables.q_tot(state, joint)
    }
}

impl Learner for BcqMaLearner<'_> {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError> {
        let batch = self
            .replay
            .transitions(self.ds, self.config.batch_size, rng);
        let tables = self.critic.evaluate()?;
        let mut grad = CriticGrad::zeros(&self.critic);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for sample in &batch {
            let step = sample.step;
            let y = if step.done {
                step.reward
            } else {
                step.reward + self.config.gamma * self.target_value(step.next_state, audit)
            };
            let diff = tables.q_tot(step.state, step.action) - y;
            loss += 0.5 * diff * diff * scale;
            grad.add_q_tot(&tables, step.state, step.action, diff * scale);
        }
        let grads = self.critic.gradients(&tables, &grad)?;
        self.critic_opt.step(self.critic.params_mut(), grads)?;
        self.steps += 1;
        if self.steps.is_multiple_of(self.config.target_update_d) {
            self.target.copy_from(&self.critic);
            self.target_tables = self.target.evaluate()?;
        }
        Ok(StepLosses {
            critic: Some(loss),
            policy: None,
        })
    }

    fn greedy_joint_actions(&self) -> Result<(Vec<usize>, u64), LearnerError> {
        let tables = self.critic.evaluate()?;
        let mut fallbacks = 0;
        let joint = (0..self.ds.num_states())
            .map(|s| {
                if self.unvisited[s] {
                    // no counts at all: the "most frequent" action is the lowest index
                    fallbacks += 1;
                    return 0;
                }
                self.space.encode(&self.masked_greedy(&tables, s))
            })
            .collect();
        Ok((joint, fallbacks))
    }

    fn q_value(&self, state: usize, joint: usize) -> Result<Option<f64>, LearnerError> {
        Ok(Some(self.critic.evaluate()?.q_tot(state, joint)))
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            algorithm: Algorithm::BcqMa,
            num_states: self.ds.num_states(),
            num_agents: self.space.num_agents,
            actions_per_agent: self.space.actions_per_agent,
            critic: self.critic.agents.nets.clone(),
            mixer: Some(self.critic.mixer.clone()),
            policies: Vec::new(),
        }
    }
}
