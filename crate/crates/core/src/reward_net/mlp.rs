use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::traj::Step;

use super::params::{Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Dense layer, weights stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }
}

/// Feed-forward scalar reward head: hidden layers with a shared activation, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-layer outputs retained for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

impl RewardNet {
    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut net = Self::zeros(input_dim, hidden, activation);
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        net
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        RewardNet { layers, activation }
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::invalid("network needs at least one layer"));
        };
        if last.out_dim != 1 {
            return Err(Error::invalid("final layer must have one output"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim
            {
                return Err(Error::invalid(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::invalid(format!("layer {i} does not compose with layer {}", i - 1)));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i}")));
            }
        }
        Ok(RewardNet { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)
    }

    /// r_θ(s, a) on the concatenated `[state; action]` input.
    pub fn reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(state.len() + action.len());
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        self.forward(&x)
    }

    pub fn reward_step(&self, step: &Step) -> Result<f64> {
        self.reward(&step.state, &step.action)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        self.check_input(x)?;
        cache.input.clear();
        cache.input.extend_from_slice(x);
        cache.outputs.resize_with(self.layers.len(), Vec::new);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.outputs.split_at_mut(i);
            let input = if i == 0 { &cache.input } else { &prev[i - 1] };
            let out = &mut rest[0];
            out.resize(layer.out_dim, 0.0);
            layer.affine(input, out);
            if i != last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        let y = cache.outputs[last][0];
        if !y.is_finite() {
            return Err(Error::NonFinite("reward network output".into()));
        }
        Ok(y)
    }

    /// Accumulates `dloss/doutput · doutput/dθ` into `grads` for the input held in `cache`.
    pub fn backward(&self, cache: &ForwardCache, dout: f64, grads: &mut Gradients) {
        let mut delta = vec![dout];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
            let gw = &mut grads.tensors[2 * i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            grads.tensors[2 * i + 1]
                .iter_mut()
                .zip(&delta)
                .for_each(|(g, d)| *g += d);
            if i > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
                }
                for (n, y) in next.iter_mut().zip(input) {
                    *n *= self.activation.derivative_from_output(*y);
                }
                delta = next;
            }
        }
    }
}

impl ParamSet for RewardNet {
    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}
