//! Offline training algorithms and their shared driver.
//!
//! Every learner consumes an [`OfflineDataset`], trains for a fixed number of
//! gradient steps, and is evaluated on an environment with the same state and
//! action spaces. Evaluation never feeds data back into training.

mod bc_ma;
mod bcq_ma;
mod checkpoint;
mod common;
mod config;
mod cql_ma;
pub mod decomposition;
mod icq;
mod icq_ma;
mod metrics;
mod z;

pub use bc_ma::BcMaLearner;
pub use bcq_ma::BcqMaLearner;
pub use checkpoint::Checkpoint;
pub use config::{Algorithm, LearnerConfig, ZMode};
pub use cql_ma::{cql_penalty, CqlMaLearner, CqlPenalty};
pub use icq::IcqLearner;
pub use icq_ma::IcqMaLearner;
pub use metrics::{is_divergent, MetricRecord, TargetAudit, TrainMetrics};
pub use z::{behavior_log_z, compute_z, log_mean_exp, Normalizers};

use thiserror::Error;

use crate::approx::ApproxError;
use crate::dataset::{DatasetError, OfflineDataset};
use crate::mdp::{monte_carlo_value, rollout, JointPolicy, MdpError, TabularMdp};
use crate::rng::{derive_seed, seeded, LabRng};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("dataset does not match the environment: {0}")]
    Mismatch(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("behavior-model normalizer requested without a behavior table")]
    MissingBehavior,
    #[error("behavior estimate undefined at state {state}")]
    UndefinedBehavior { state: usize },
    #[error("dataset holds no transitions")]
    EmptyDataset,
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loss values of one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub critic: Option<f64>,
    pub policy: Option<f64>,
}

/// Common interface of the five algorithms.
pub trait Learner {
    fn train_step(
        &mut self,
        rng: &mut LabRng,
        audit: &mut TargetAudit,
    ) -> Result<StepLosses, LearnerError>;

    /// Greedy joint action per state and the number of states where every
    /// action was masked and the fallback rule applied.
    fn greedy_joint_actions(&self) -> Result<(Vec<usize>, u64), LearnerError>;

    /// Critic value of `(state, joint)`; `None` for critic-free learners.
    fn q_value(&self, state: usize, joint: usize) -> Result<Option<f64>, LearnerError>;

    fn checkpoint(&self) -> Checkpoint;
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    pub audit: TargetAudit,
    pub checkpoint: Checkpoint,
    /// Greedy decentralized policy at the end of training.
    pub policy: JointPolicy,
}

fn check_compatible(ds: &OfflineDataset, env: &TabularMdp) -> Result<(), LearnerError> {
    if ds.num_states() != env.num_states() || ds.action_space() != env.action_space() {
        return Err(LearnerError::Mismatch(format!(
            "dataset has {} states and {:?}, environment has {} states and {:?}",
            ds.num_states(),
            ds.action_space(),
            env.num_states(),
            env.action_space()
        )));
    }
    if ds.num_transitions() == 0 {
        return Err(LearnerError::EmptyDataset);
    }
    Ok(())
}

/// Builds the learner named by `config.algorithm`.
pub fn build_learner<'a>(
    ds: &'a OfflineDataset,
    config: &LearnerConfig,
) -> Result<Box<dyn Learner + 'a>, LearnerError> {
    config.validate()?;
    Ok(match config.algorithm {
        Algorithm::Icq => Box::new(IcqLearner::new(ds, config.clone())?),
        Algorithm::IcqMa => Box::new(IcqMaLearner::new(ds, config.clone())?),
        Algorithm::BcqMa => Box::new(BcqMaLearner::new(ds, config.clone())?),
        Algorithm::CqlMa => Box::new(CqlMaLearner::new(ds, config.clone())?),
        Algorithm::BcMa => Box::new(BcMaLearner::new(ds, config.clone())?),
    })
}

/// Trains `config.algorithm` on `ds`, evaluating on `env` every
/// `config.log_every` steps (and at step 0). `observer` sees each record as
/// soon as it is produced.
pub fn train(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
    observer: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome, LearnerError> {
    config.validate()?;
    check_compatible(ds, env)?;
    let env = if env.gamma() != config.gamma {
        env.with_gamma(config.gamma)?
    } else {
        env.clone()
    };
    let mut learner = build_learner(ds, config)?;
    let true_value = reference_value(&env, config)?;
    let mut metrics = TrainMetrics::new(true_value);
    let mut audit = TargetAudit::new(ds.num_states(), ds.num_joint_actions());
    let mut rng = seeded(derive_seed(config.seed, 2));
    let mut losses: Option<StepLosses> = None;

    let mut record = |step: usize,
                      losses: Option<StepLosses>,
                      learner: &dyn Learner,
                      metrics: &mut TrainMetrics| {
        let rec = evaluate(&env, learner, config, step, losses, metrics)?;
        observer(&rec);
        metrics.push(rec);
        Ok::<(), LearnerError>(())
    };

    record(0, losses, learner.as_ref(), &mut metrics)?;
    for step in 1..=config.total_steps {
        match learner.train_step(&mut rng, &mut audit) {
            Ok(l) => losses = Some(l),
            Err(LearnerError::Approx(ApproxError::NonFiniteGradient { .. })) => {
                // the critic has blown up; log it as diverged and stop
                let rec = MetricRecord {
                    step,
                    q_estimate: Some(f64::INFINITY),
                    critic_loss: Some(f64::INFINITY),
                    policy_loss: losses.and_then(|l| l.policy),
                    eval_return: metrics.last().map_or(0.0, |r| r.eval_return),
                    policy_value: metrics.last().map_or(0.0, |r| r.policy_value),
                    diverged: true,
                };
                observer(&rec);
                metrics.push(rec);
                break;
            }
            Err(e) => return Err(e),
        }
        if step % config.log_every == 0 || step == config.total_steps {
            record(step, losses, learner.as_ref(), &mut metrics)?;
        }
    }
    let (joint, _) = learner.greedy_joint_actions()?;
    let policy = JointPolicy::deterministic(env.action_space(), env.num_states(), &joint)?;
    Ok(TrainOutcome {
        metrics,
        audit,
        checkpoint: learner.checkpoint(),
        policy,
    })
}

/// Monte-Carlo value of the optimal policy from the initial state under the
/// config's discount, the reference for the divergence flag.
pub fn reference_value(env: &TabularMdp, config: &LearnerConfig) -> Result<f64, LearnerError> {
    let env = if env.gamma() != config.gamma {
        env.with_gamma(config.gamma)?
    } else {
        env.clone()
    };
    let estimate = monte_carlo_value(
        &env,
        &env.optimal_policy(),
        config.eval_episodes,
        derive_seed(config.seed, 90),
    )?;
    Ok(estimate.mean)
}

fn evaluate(
    env: &TabularMdp,
    learner: &dyn Learner,
    config: &LearnerConfig,
    step: usize,
    losses: Option<StepLosses>,
    metrics: &mut TrainMetrics,
) -> Result<MetricRecord, LearnerError> {
    let (joint, fallbacks) = learner.greedy_joint_actions()?;
    metrics.masked_fallbacks += fallbacks;
    let policy = JointPolicy::deterministic(env.action_space(), env.num_states(), &joint)?;
    let episodes = rollout(
        env,
        &policy,
        derive_seed(derive_seed(config.seed, 3), step as u64),
        config.eval_episodes,
    )?;
    let n = episodes.len() as f64;
    let eval_return = episodes.iter().map(|t| t.total_reward()).sum::<f64>() / n;
    let policy_value = episodes
        .iter()
        .map(|t| t.discounted_return(env.gamma()))
        .sum::<f64>()
        / n;
    let s0 = env.initial_state();
    let q_estimate = learner.q_value(s0, joint[s0])?;
    let diverged = q_estimate.is_some_and(|q| is_divergent(q, metrics.true_value));
    Ok(MetricRecord {
        step,
        q_estimate,
        critic_loss: losses.and_then(|l| l.critic),
        policy_loss: losses.and_then(|l| l.policy),
        eval_return,
        policy_value,
        diverged,
    })
}

fn train_as(
    algorithm: Algorithm,
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    let mut config = config.clone();
    config.algorithm = algorithm;
    train(ds, env, &config, &mut |_| {})
}

/// Single-agent implicit-constraint learner over joint actions.
pub fn train_icq(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    train_as(Algorithm::Icq, ds, env, config)
}

pub fn train_icq_ma(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    train_as(Algorithm::IcqMa, ds, env, config)
}

pub fn train_bcq_ma(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    train_as(Algorithm::BcqMa, ds, env, config)
}

pub fn train_cql_ma(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    train_as(Algorithm::CqlMa, ds, env, config)
}

pub fn train_bc_ma(
    ds: &OfflineDataset,
    env: &TabularMdp,
    config: &LearnerConfig,
) -> Result<TrainOutcome, LearnerError> {
    train_as(Algorithm::BcMa, ds, env, config)
}

#[cfg(test)]
mod tests;
