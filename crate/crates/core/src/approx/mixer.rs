use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{Activation, DenseNet, ForwardCache};
use super::ApproxError;

/// Hypernetworks producing the monotonic mixing weights `w^i(s) >= 0` and the
/// bias `b(s)` from the global state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerParams {
    pub hyper_w: DenseNet,
    pub hyper_b: DenseNet,
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerCache {
    pub weights: Vec<f64>,
    pub bias: f64,
    w_cache: ForwardCache,
    b_cache: ForwardCache,
}

/// Gradients of one mixer evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerGrads {
    pub hyper_w: Vec<f64>,
    pub hyper_b: Vec<f64>,
}

impl MixerGrads {
    pub fn zeros(mixer: &MixerParams) -> Self {
        Self {
            hyper_w: vec![0.0; mixer.hyper_w.param_count()],
            hyper_b: vec![0.0; mixer.hyper_b.param_count()],
        }
    }
}

impl MixerParams {
    pub const HIDDEN: usize = 32;

    /// `state -> hidden (relu) -> n (abs)` and `state -> hidden (relu) -> 1`.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        num_agents: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        Ok(Self {
            hyper_w: DenseNet::mlp(
                &[state_dim, hidden, num_agents],
                Activation::Relu,
                Activation::Abs,
                rng,
            )?,
            hyper_b: DenseNet::mlp(
                &[state_dim, hidden, 1],
                Activation::Relu,
                Activation::Identity,
                rng,
            )?,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.hyper_w.output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.hyper_w.input_dim()
    }

    pub fn weights(&self, state: &[f64]) -> Result<Vec<f64>, ApproxError> {
        self.hyper_w.forward(state)
    }

    pub fn bias(&self, state: &[f64]) -> Result<f64, ApproxError> {
        Ok(self.hyper_b.forward(state)?[0])
    }

    pub fn forward_cached(&self, state: &[f64]) -> Result<MixerCache, ApproxError> {
        let w_cache = self.hyper_w.forward_cached(state)?;
        let b_cache = self.hyper_b.forward_cached(state)?;
        Ok(MixerCache {
            weights: w_cache.output().to_vec(),
            bias: b_cache.output()[0],
            w_cache,
            b_cache,
        })
    }

    /// `sum_i w^i(s) q_i + b(s)`.
    pub fn combine(&self, state: &[f64], per_agent_q: &[f64]) -> Result<f64, ApproxError> {
        let cache = self.forward_cached(state)?;
        combine_with(&cache, per_agent_q)
    }

    /// Backpropagates `d loss / d output` given summed statistics over the
    /// evaluations sharing `cache`: `grad_weights[i] = sum g * q_i` and
    /// `grad_bias = sum g`.
    pub fn backward(
        &self,
        cache: &MixerCache,
        grad_weights: &[f64],
        grad_bias: f64,
        grads: &mut MixerGrads,
    ) -> Result<(), ApproxError> {
        self.hyper_w
            .backward(&cache.w_cache, grad_weights, &mut grads.hyper_w)?;
        self.hyper_b
            .backward(&cache.b_cache, &[grad_bias], &mut grads.hyper_b)?;
        Ok(())
    }

    pub fn copy_from(&mut self, other: &MixerParams) {
        self.hyper_w.copy_from(&other.hyper_w);
        self.hyper_b.copy_from(&other.hyper_b);
    }
}

pub fn combine_with(cache: &MixerCache, per_agent_q: &[f64]) -> Result<f64, ApproxError> {
    if per_agent_q.len() != cache.weights.len() {
        return Err(ApproxError::Dimension {
            expected: cache.weights.len(),
            found: per_agent_q.len(),
        });
    }
    Ok(cache
        .weights
        .iter()
        .zip(per_agent_q)
        .map(|(w, q)| w * q)
        .sum::<f64>()
        + cache.bias)
}

/// Mixed value with explicit weights and bias.
pub fn mixer_combine(weights: &[f64], bias: f64, per_agent_q: &[f64]) -> f64 {
    weights
        .iter()
        .zip(per_agent_q)
        .map(|(w, q)| w * q)
        .sum::<f64>()
        + bias
}
