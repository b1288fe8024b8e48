use super::common::{BlockOptimizer, PolicyHeads, Replay};
use super::{Algorithm, Checkpoint, Learner, LearnerConfig, LearnerError, StepLosses, TargetAudit};
use crate::dataset::OfflineDataset;
use crate::mdp::ActionSpace;
use crate::rng::{derive_seed, seeded, LabRng};

/// Per-agent behavior cloning; no critic.
pub struct BcMaLearner<'a> {
    ds: &'a OfflineDataset,
    config: LearnerConfig,
    space: ActionSpace,
    policies: PolicyHeads,
    policy_opt: BlockOptimizer,
    replay: Replay,
}

impl<'a> BcMaLearner<'a> {
    pub fn new(ds: &'a OfflineDataset, config: LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        if ds.num_transitions() == 0 {
            return Err(LearnerError::EmptyDataset);
        }
        let space = ds.action_space();
        let mut rng = seeded(derive_seed(config.seed, 1));
        let policies = PolicyHeads::new(
            space.num_agents,
            ds.num_states(),
            space.actions_per_agent,
            config.hidden,
            &mut rng,
        )?;
        Ok(Self {
            ds,
            space,
            policy_opt: BlockOptimizer::new(
                &policies.param_sizes(),
                config.policy_lr,
                config.grad_clip,
            ),
            policies,
            replay: Replay::new(ds),
            config,
        })
    }
}

impl Learner for BcMaLearner<'_> {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        _audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError> {
        let batch = self
            .replay
            .transitions(self.ds, self.config.batch_size, rng);
        let (ptables, logp) = self.policies.evaluate()?;
        let k = self.space.actions_per_agent;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = self.policies.group.zero_grads();
        let mut loss = 0.0;
        for sample in &batch {
            let s = sample.step.state;
            for i in 0..self.space.num_agents {
                let ai = self.space.component(sample.step.action, i);
                loss -= scale * logp[i][s * k + ai];
                PolicyHeads::add_nll(&mut grad[i], &logp[i], k, s, ai, scale);
            }
        }
        let grads = self.policies.group.gradients(&ptables, &grad)?;
        self.policy_opt.step(self.policies.params_mut(), grads)?;
        Ok(StepLosses {
            critic: None,
            policy: Some(loss),
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

    fn q_value(&self, _state: usize, _joint: usize) -> Result<Option<f64>, LearnerError> {
        Ok(None)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            algorithm: Algorithm::BcMa,
            num_states: self.ds.num_states(),
            num_agents: self.space.num_agents,
            actions_per_agent: self.space.actions_per_agent,
            critic: Vec::new(),
            mixer: None,
            policies: self.policies.group.nets.clone(),
        }
    }
}
