use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Algorithm, LearnerError};
use crate::approx::{DenseNet, MixerParams};

/// Trained parameters of one run.
///
/// `critic` holds the per-agent utilities (or the single joint head for the
/// single-agent learner), `policies` the per-agent policy logits networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub algorithm: Algorithm,
    pub num_states: usize,
    pub num_agents: usize,
    pub actions_per_agent: usize,
    pub critic: Vec<DenseNet>,
    pub mixer: Option<MixerParams>,
    pub policies: Vec<DenseNet>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnerError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| LearnerError::Checkpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LearnerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LearnerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Output width of the critic and policy heads.
    fn head_width(&self) -> Result<usize, LearnerError> {
        if self.algorithm == Algorithm::Icq {
            u32::try_from(self.num_agents)
                .ok()
                .and_then(|n| self.actions_per_agent.checked_pow(n))
                .ok_or_else(|| LearnerError::Checkpoint("joint action count overflows".into()))
        } else {
            Ok(self.actions_per_agent)
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |m: String| Err(LearnerError::Checkpoint(m));
        if self.num_states == 0 || self.num_agents == 0 || self.actions_per_agent == 0 {
            return fail("sizes must be positive".into());
        }
        let width = self.head_width()?;
        let heads = if self.algorithm == Algorithm::Icq {
            1
        } else {
            self.num_agents
        };
        let expected_critics = if self.algorithm.has_critic() {
            heads
        } else {
            0
        };
        if self.critic.len() != expected_critics {
            return fail(format!(
                "expected {expected_critics} critic networks, found {}",
                self.critic.len()
            ));
        }
        // the batch-constrained learner acts greedily on its critic
        let expected_policies = if self.algorithm == Algorithm::BcqMa {
            0
        } else {
            heads
        };
        if self.policies.len() != expected_policies {
            return fail(format!(
                "expected {expected_policies} policy networks, found {}",
                self.policies.len()
            ));
        }
        for (role, net) in self
            .critic
            .iter()
            .map(|n| ("critic", n))
            .chain(self.policies.iter().map(|n| ("policy", n)))
        {
            if net.input_dim() != self.num_states || net.output_dim() != width {
                return fail(format!(
                    "{role} network maps {} -> {}, expected {} -> {width}",
                    net.input_dim(),
                    net.output_dim(),
                    self.num_states
                ));
            }
        }
        let needs_mixer = matches!(
            self.algorithm,
            Algorithm::IcqMa | Algorithm::BcqMa | Algorithm::CqlMa
        );
        match (&self.mixer, needs_mixer) {
            (Some(m), true) => {
                if m.state_dim() != self.num_states
                    || m.num_agents() != self.num_agents
                    || m.hyper_b.output_dim() != 1
                    || m.hyper_b.input_dim() != self.num_states
                {
                    return fail("mixer shape does not match".into());
                }
            }
            (None, false) => {}
            (Some(_), false) => return fail(format!("{} has no mixer", self.algorithm)),
            (None, true) => return fail(format!("{} needs a mixer", self.algorithm)),
        }
        Ok(())
    }
}
