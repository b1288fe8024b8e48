use super::common::{BlockOptimizer, CriticGrad, CriticTables, MixedCritic, PolicyHeads, Replay};
use super::{Algorithm, Checkpoint, Learner, LearnerConfig, LearnerError, StepLosses, TargetAudit};
use crate::dataset::OfflineDataset;
use crate::mdp::ActionSpace;
use crate::operators::{trace_returns, TraceStep};
use crate::rng::{derive_seed, seeded, LabRng};

/// Value and gradients of the conservative penalty at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct CqlPenalty {
    pub value: f64,
    /// `[agent][action]`.
    pub grad_q: Vec<Vec<f64>>,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

/// `sum_i logsumexp_a (w^i Q^i(a) + b) - E_mu Q_tot` for a factored `mu`.
///
/// The bias enters each agent's log-sum-exp once but `Q_tot` only once in
/// total, so `d/db = n - 1`.
pub fn cql_penalty(
    q_rows: &[Vec<f64>],
    weights: &[f64],
    bias: f64,
    mu_rows: &[Vec<f64>],
) -> CqlPenalty {
    let n = q_rows.len();
    let mut value = 0.0;
    let mut expected = bias;
    let mut grad_q = Vec::with_capacity(n);
    let mut grad_w = Vec::with_capacity(n);
    for i in 0..n {
        let (q, w, mu) = (&q_rows[i], weights[i], &mu_rows[i]);
        let logits: Vec<f64> = q.iter().map(|x| w * x + bias).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        value += max + sum.ln();
        let soft: Vec<f64> = logits.iter().map(|l| (l - max).exp() / sum).collect();
        let e_mu: f64 = q.iter().zip(mu).map(|(x, m)| x * m).sum();
        expected += w * e_mu;
        grad_q.push(soft.iter().zip(mu).map(|(p, m)| w * (p - m)).collect());
        grad_w.push(q.iter().zip(&soft).map(|(x, p)| x * p).sum::<f64>() - e_mu);
    }
    CqlPenalty {
        value: value - expected,
        grad_q,
        grad_w,
        grad_b: n as f64 - 1.0,
    }
}

/// Conservative baseline: Tree Backup targets under the current decentralized
/// policies plus a log-sum-exp penalty against the data actions.
pub struct CqlMaLearner<'a> {
    ds: &'a OfflineDataset,
    config: LearnerConfig,
    space: ActionSpace,
    critic: MixedCritic,
    target: MixedCritic,
    target_tables: CriticTables,
    policies: PolicyHeads,
    critic_opt: BlockOptimizer,
    policy_opt: BlockOptimizer,
    replay: Replay,
    steps: usize,
}

impl<'a> CqlMaLearner<'a> {
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
        Ok(Self {
            ds,
            space,
            critic_opt: BlockOptimizer::new(
                &critic.param_sizes(),
                config.critic_lr,
                config.grad_clip,
            ),
            policy_opt: BlockOptimizer::new(
                &policies.param_sizes(),
                config.policy_lr,
                config.grad_clip,
            ),
            critic,
            target,
            target_tables,
            policies,
            replay: Replay::new(ds),
            steps: 0,
            config,
        })
    }

    fn agent_probs(&self, logp: &[Vec<f64>], state: usize) -> Vec<Vec<f64>> {
        let k = self.space.actions_per_agent;
        logp.iter()
            .map(|l| {
                l[state * k..(state + 1) * k]
                    .iter()
                    .map(|x| x.exp())
                    .collect()
            })
            .collect()
    }

    fn tree_backup_targets(&self, traj: usize, logp: &[Vec<f64>]) -> Vec<f64> {
        let steps = &self.ds.trajectories()[traj].steps;
        let mut trace = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            if step.done {
                trace.push(TraceStep {
                    reward: step.reward,
                    done: true,
                    bootstrap_next: 0.0,
                    q_next_taken: None,
                    trace_next: 0.0,
                });
                continue;
            }
            let probs = self.agent_probs(logp, step.next_state);
            let rows: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
            let expected = self.target_tables.expected_q_tot(step.next_state, &rows);
            let (q_next_taken, trace_next) = match steps.get(t + 1) {
                Some(next) => {
                    let pi: f64 = (0..self.space.num_agents)
                        .map(|i| probs[i][self.space.component(next.action, i)])
                        .product();
                    (Some(self.target_tables.q_tot(next.state, next.action)), pi)
                }
                None => (None, 0.0),
            };
            trace.push(TraceStep {
                reward: step.reward,
                done: false,
                bootstrap_next: expected,
                q_next_taken,
                trace_next,
            });
        }
        trace_returns(&trace, self.config.gamma, self.config.lambda)
    }
}

impl Learner for CqlMaLearner<'_> {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        _audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError> {
        let trajs = self.replay.trajectories(self.config.batch_size, rng);
        let tables = self.critic.evaluate()?;
        let (ptables, logp) = self.policies.evaluate()?;
        let n = self.space.num_agents;
        let k = self.space.actions_per_agent;
        let total: usize = trajs.iter().map(|&t| self.ds.trajectories()[t].len()).sum();
        let scale = 1.0 / total as f64;
        let mut grad = CriticGrad::zeros(&self.critic);
        let mut pgrad = self.policies.group.zero_grads();
        let (mut critic_loss, mut policy_loss) = (0.0, 0.0);
        for &t in &trajs {
            let targets = self.tree_backup_targets(t, &logp);
            for (step, y) in self.ds.trajectories()[t].steps.iter().zip(targets) {
                let (s, a) = (step.state, step.action);
                let diff = tables.q_tot(s, a) - y;
                critic_loss += 0.5 * diff * diff * scale;
                grad.add_q_tot(&tables, s, a, diff * scale);

                // penalty against the data action (a one-sample estimate of E_mu)
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| tables.agents.row(i, s).to_vec()).collect();
                let mu: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let mut m = vec![0.0; k];
                        m[self.space.component(a, i)] = 1.0;
                        m
                    })
                    .collect();
                let pen = cql_penalty(&rows, tables.weights(s), tables.bias(s), &mu);
                let c = self.config.alpha_cql * scale;
                critic_loss += c * pen.value;
                for i in 0..n {
                    for (g, pq) in grad.q[i][s * k..(s + 1) * k].iter_mut().zip(&pen.grad_q[i]) {
                        *g += c * pq;
                    }
                    grad.w[s][i] += c * pen.grad_w[i];
                }
                grad.b[s] += c * pen.grad_b;

                for i in 0..n {
                    let ai = self.space.component(a, i);
                    let coef = tables.q_agent(i, s, ai) * scale;
                    policy_loss -= coef * logp[i][s * k + ai];
                    PolicyHeads::add_nll(&mut pgrad[i], &logp[i], k, s, ai, coef);
                }
            }
        }
        let critic_grads = self.critic.gradients(&tables, &grad)?;
        let policy_grads = self.policies.group.gradients(&ptables, &pgrad)?;
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
            algorithm: Algorithm::CqlMa,
            num_states: self.ds.num_states(),
            num_agents: self.space.num_agents,
            actions_per_agent: self.space.actions_per_agent,
            critic: self.critic.agents.nets.clone(),
            mixer: Some(self.critic.mixer.clone()),
            policies: self.policies.group.nets.clone(),
        }
    }
}
