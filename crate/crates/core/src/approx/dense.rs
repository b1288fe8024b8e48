use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ApproxError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Softmax over the whole layer output.
    SoftmaxRow,
    /// Elementwise absolute value.
    Abs,
}

impl Activation {
    fn apply(self, pre: &[f64], out: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.max(0.0);
                }
            }
            Activation::Identity => out.copy_from_slice(pre),
            Activation::Abs => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.abs();
                }
            }
            Activation::SoftmaxRow => {
                let max = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = (p - max).exp();
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
        }
    }

    /// Maps `d loss / d out` to `d loss / d pre`.
    fn backprop(self, pre: &[f64], out: &[f64], grad_out: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => pre
                .iter()
                .zip(grad_out)
                .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Identity => grad_out.to_vec(),
            Activation::Abs => pre
                .iter()
                .zip(grad_out)
                .map(|(&p, &g)| g * p.signum() * f64::from(u8::from(p != 0.0)))
                .collect(),
            Activation::SoftmaxRow => {
                let dot: f64 = out.iter().zip(grad_out).map(|(y, g)| y * g).sum();
                out.iter()
                    .zip(grad_out)
                    .map(|(y, g)| y * (g - dot))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Feed-forward network whose parameters live in one flat vector.
///
/// Per layer the layout is the row-major weight matrix (`outputs x inputs`)
/// followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRepr", into = "NetRepr")]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Checkpoint form: layer shapes with row-major values.
#[derive(Serialize, Deserialize)]
struct NetRepr {
    layers: Vec<LayerRepr>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<NetRepr> for DenseNet {
    type Error = ApproxError;

    fn try_from(repr: NetRepr) -> Result<Self, Self::Error> {
        let shapes: Vec<LayerShape> = repr
            .layers
            .iter()
            .map(|l| LayerShape {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
            })
            .collect();
        let mut net = DenseNet::zeros(&shapes)?;
        for (i, layer) in repr.layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(ApproxError::Checkpoint(format!("layer {i} value count")));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(ApproxError::Checkpoint(format!(
                    "layer {i} has non-finite values"
                )));
            }
            let start = net.offsets[i];
            let w_end = start + layer.weights.len();
            net.params[start..w_end].copy_from_slice(&layer.weights);
            net.params[w_end..w_end + layer.bias.len()].copy_from_slice(&layer.bias);
        }
        Ok(net)
    }
}

impl From<DenseNet> for NetRepr {
    fn from(net: DenseNet) -> Self {
        let layers = net
            .layers
            .iter()
            .zip(&net.offsets)
            .map(|(shape, &start)| {
                let w_end = start + shape.inputs * shape.outputs;
                LayerRepr {
                    inputs: shape.inputs,
                    outputs: shape.outputs,
                    activation: shape.activation,
                    weights: net.params[start..w_end].to_vec(),
                    bias: net.params[w_end..w_end + shape.outputs].to_vec(),
                }
            })
            .collect();
        Self { layers }
    }
}

/// Intermediate values of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input to every layer, then the final output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the output")
    }
}

impl DenseNet {
    /// All-zero parameters.
    pub fn zeros(layers: &[LayerShape]) -> Result<Self, ApproxError> {
        if layers.is_empty() {
            return Err(ApproxError::Architecture("network needs a layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(ApproxError::Architecture(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        if layers.iter().any(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(ApproxError::Architecture(
                "layers need positive widths".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for layer in layers {
            offsets.push(total);
            total = total
                .checked_add(layer.param_count())
                .filter(|&t| t <= 1 << 24)
                .ok_or_else(|| ApproxError::Architecture("too many parameters".into()))?;
        }
        Ok(Self {
            layers: layers.to_vec(),
            offsets,
            params: vec![0.0; total],
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn random<R: Rng + ?Sized>(
        layers: &[LayerShape],
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let mut net = Self::zeros(layers)?;
        for (shape, &start) in net.layers.iter().zip(&net.offsets) {
            let bound = 1.0 / (shape.inputs as f64).sqrt();
            for p in &mut net.params[start..start + shape.param_count()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Multi-layer perceptron: `sizes[0] -> ... -> sizes[last]` with `hidden`
    /// between layers and `output` on the last.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        if sizes.len() < 2 {
            return Err(ApproxError::Architecture(
                "need input and output sizes".into(),
            ));
        }
        let count = sizes.len() - 1;
        let shapes: Vec<LayerShape> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 1 == count { output } else { hidden },
            })
            .collect();
        Self::random(&shapes, rng)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the last layer so the network starts out emitting 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let start = self.offsets[last];
        self.params[start..].fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ApproxError> {
        self.forward_cached(input)
            .map(|mut cache| cache.activations.pop().expect("output"))
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache, ApproxError> {
        if input.len() != self.input_dim() {
            return Err(ApproxError::Dimension {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for (shape, &start) in self.layers.iter().zip(&self.offsets) {
            let x = activations.last().expect("input");
            let weights = &self.params[start..start + shape.inputs * shape.outputs];
            let bias =
                &self.params[start + shape.inputs * shape.outputs..start + shape.param_count()];
            let pre: Vec<f64> = weights
                .chunks_exact(shape.inputs)
                .zip(bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
                .collect();
            let mut out = vec![0.0; shape.outputs];
            shape.activation.apply(&pre, &mut out);
            pre_activations.push(pre);
            activations.push(out);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Reverse-mode pass: accumulates `d loss / d params` into `grads` and
    /// returns `d loss / d input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>, ApproxError> {
        if cache.pre_activations.len() != self.layers.len()
            || cache
                .pre_activations
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.outputs)
        {
            return Err(ApproxError::CacheMismatch);
        }
        if grad_output.len() != self.output_dim() {
            return Err(ApproxError::Dimension {
                expected: self.output_dim(),
                found: grad_output.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(ApproxError::Dimension {
                expected: self.params.len(),
                found: grads.len(),
            });
        }
        let mut grad = grad_output.to_vec();
        for (i, (shape, &start)) in self.layers.iter().zip(&self.offsets).enumerate().rev() {
            let delta = shape.activation.backprop(
                &cache.pre_activations[i],
                &cache.activations[i + 1],
                &grad,
            );
            let x = &cache.activations[i];
            let w_len = shape.inputs * shape.outputs;
            let weights = &self.params[start..start + w_len];
            {
                let (gw, gb) = grads[start..start + shape.param_count()].split_at_mut(w_len);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xi) in gw[o * shape.inputs..(o + 1) * shape.inputs]
                        .iter_mut()
                        .zip(x)
                    {
                        *g += d * xi;
                    }
                }
            }
            let mut grad_in = vec![0.0; shape.inputs];
            for (row, &d) in weights.chunks_exact(shape.inputs).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (g, w) in grad_in.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            grad = grad_in;
        }
        Ok(grad)
    }

    /// Copies parameters from a network with the same architecture.
    pub fn copy_from(&mut self, other: &DenseNet) {
        assert_eq!(self.layers, other.layers, "architectures differ");
        self.params.copy_from_slice(&other.params);
    }
}
