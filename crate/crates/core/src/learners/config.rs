use serde::{Deserialize, Serialize};

use super::LearnerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Icq,
    IcqMa,
    BcqMa,
    CqlMa,
    BcMa,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Icq,
        Algorithm::IcqMa,
        Algorithm::BcqMa,
        Algorithm::CqlMa,
        Algorithm::BcMa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Icq => "icq",
            Algorithm::IcqMa => "icq-ma",
            Algorithm::BcqMa => "bcq-ma",
            Algorithm::CqlMa => "cql-ma",
            Algorithm::BcMa => "bc-ma",
        }
    }

    pub fn has_critic(self) -> bool {
        self != Algorithm::BcMa
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LearnerError::Config(format!("unknown algorithm `{s}`")))
    }
}

/// How the partition function `Z(s)` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZMode {
    /// `sum over seen a of mu_hat(a|s) exp(Q(s,a)/alpha)` with count-based `mu_hat`.
    BehaviorModel,
    /// Mean of `exp(Q/alpha)` over the mini-batch's next pairs.
    MinibatchSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default = "default_alpha_cql")]
    pub alpha_cql: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_target_update")]
    pub target_update_d: usize,
    /// `None` picks behavior-model for `icq` and minibatch-softmax otherwise.
    #[serde(default)]
    pub z_mode: Option<ZMode>,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "default_policy_lr")]
    pub policy_lr: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Hidden width of the agent and policy networks; the mixer uses 32.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_alpha() -> f64 {
    100.0
}
fn default_lambda() -> f64 {
    0.8
}
fn default_zeta() -> f64 {
    0.3
}
fn default_alpha_cql() -> f64 {
    2.0
}
fn default_batch_size() -> usize {
    16
}
fn default_gamma() -> f64 {
    0.99
}
fn default_target_update() -> usize {
    600
}
fn default_total_steps() -> usize {
    10000
}
fn default_critic_lr() -> f64 {
    1e-4
}
fn default_policy_lr() -> f64 {
    5e-4
}
fn default_grad_clip() -> f64 {
    20.0
}
fn default_hidden() -> usize {
    64
}
fn default_log_every() -> usize {
    50
}
fn default_eval_episodes() -> usize {
    10
}

impl LearnerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            alpha: default_alpha(),
            lambda: default_lambda(),
            zeta: default_zeta(),
            alpha_cql: default_alpha_cql(),
            batch_size: default_batch_size(),
            gamma: default_gamma(),
            target_update_d: default_target_update(),
            z_mode: None,
            total_steps: default_total_steps(),
            seed: 0,
            critic_lr: default_critic_lr(),
            policy_lr: default_policy_lr(),
            grad_clip: default_grad_clip(),
            hidden: default_hidden(),
            log_every: default_log_every(),
            eval_episodes: default_eval_episodes(),
        }
    }

    pub fn resolved_z_mode(&self) -> ZMode {
        self.z_mode.unwrap_or(match self.algorithm {
            Algorithm::Icq => ZMode::BehaviorModel,
            _ => ZMode::MinibatchSoftmax,
        })
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: String| Err(LearnerError::Config(m));
        if !(self.alpha > 0.0) || self.alpha.is_nan() {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        // zeta = 0 is accepted as the "no masking" setting
        if !(0.0..=1.0).contains(&self.zeta) {
            return fail(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha_cql >= 0.0) || !self.alpha_cql.is_finite() {
            return fail(format!(
                "alpha_cql must be nonnegative, got {}",
                self.alpha_cql
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.target_update_d == 0 || self.log_every == 0 {
            return fail("target_update_d and log_every must be positive".into());
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes must be positive".into());
        }
        if self.hidden == 0 || self.hidden > 4096 {
            return fail(format!("hidden width {} out of range", self.hidden));
        }
        for (name, lr) in [("critic_lr", self.critic_lr), ("policy_lr", self.policy_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        Ok(())
    }
}
