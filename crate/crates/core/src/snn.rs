//! Spiking twins of ReLU networks.
//!
//! Every ReLU layer, and the linear output layer, becomes a layer of spiking
//! neurons carrying the same (scaled) weights. The observation is injected
//! into the first layer as a constant current on every step; deeper layers
//! receive the previous step's spikes, so a spike crosses one layer per step.
//! Output spike counts over `nt` steps are the Q estimates.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{Activation, LayerKind, NetworkDescription};
use crate::error::{Error, Result};
use crate::neuron::{LayerState, NeuronConfig};
use crate::tensor::{self, ConvGeometry, Tensor};

pub const DEFAULT_NT: usize = 500;

/// One positive weight multiplier per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ScaleVector(Vec<f32>);

impl ScaleVector {
    pub fn new(scales: Vec<f32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("scales", "empty scale vector"));
        }
        if let Some((i, s)) = scales.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid("scales", format!("scale {i} = {s} is not positive")));
        }
        Ok(ScaleVector(scales))
    }

    pub fn ones(n: usize) -> Self {
        ScaleVector(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Running products `s_0, s_0 s_1, ...`: the factor by which layer `l`'s
    /// activity is scaled once all upstream scales are applied.
    pub fn cumulative(&self) -> Vec<f32> {
        self.0
            .iter()
            .scan(1.0f32, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }
}

impl TryFrom<Vec<f32>> for ScaleVector {
    type Error = Error;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        ScaleVector::new(v)
    }
}

impl From<ScaleVector> for Vec<f32> {
    fn from(s: ScaleVector) -> Self {
        s.0
    }
}

/// The ReLU network whose activations a spiking twin built with `scales`
/// approximates: layer `l` weights times `scales[l]`, biases times the running
/// product of scales up to `l`. Its activations equal the original ones times
/// that running product.
pub fn scaled_network(net: &NetworkDescription, scales: &ScaleVector) -> Result<NetworkDescription> {
    check_scales(net, scales)?;
    let mut out = net.clone();
    for ((layer, &s), &p) in out
        .layers
        .iter_mut()
        .zip(scales.as_slice())
        .zip(&scales.cumulative())
    {
        layer.weights = layer.weights.scale(s);
        layer.bias = layer.bias.scale(p);
    }
    Ok(out)
}

fn check_scales(net: &NetworkDescription, scales: &ScaleVector) -> Result<()> {
    if scales.len() != net.n_layers() {
        return Err(Error::invalid(
            "scales",
            format!("{} scales for {} layers", scales.len(), net.n_layers()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum SpikingLayer {
    Dense {
        /// Input-major effective weights, `n_in x n_out`.
        weights_t: Vec<f32>,
        bias: Vec<f32>,
    },
    Conv {
        geom: ConvGeometry,
        kernels: Tensor,
        bias: Tensor,
        /// Per-output-position bias, flattened `K x H' x W'`.
        bias_map: Vec<f32>,
    },
}

impl SpikingLayer {
    fn n_out(&self) -> usize {
        match self {
            SpikingLayer::Dense { bias, .. } => bias.len(),
            SpikingLayer::Conv { bias_map, .. } => bias_map.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SnnOutput {
    /// Output-layer spike counts, one per action.
    pub q_estimates: Tensor,
    /// Spike count of every neuron, per layer.
    pub spike_counts: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct SpikingNetwork {
    base: Arc<NetworkDescription>,
    scales: ScaleVector,
    neurons: Vec<NeuronConfig>,
    states: Vec<LayerState>,
    layers: Vec<SpikingLayer>,
    shapes: Vec<Vec<usize>>,
    nt: usize,
    rng: ChaCha8Rng,
}

/// Build a spiking twin with the same neuron model in every layer.
pub fn convert(
    net: &NetworkDescription,
    scales: &ScaleVector,
    neuron: NeuronConfig,
    nt: usize,
) -> Result<SpikingNetwork> {
    SpikingNetwork::new(Arc::new(net.clone()), scales.clone(), vec![neuron; net.n_layers()], nt)
}

impl SpikingNetwork {
    pub fn new(
        base: Arc<NetworkDescription>,
        scales: ScaleVector,
        neurons: Vec<NeuronConfig>,
        nt: usize,
    ) -> Result<Self> {
        base.validate()?;
        check_scales(&base, &scales)?;
        if neurons.len() != base.n_layers() {
            return Err(Error::invalid(
                "neuron configs",
                format!("{} configs for {} layers", neurons.len(), base.n_layers()),
            ));
        }
        for n in &neurons {
            n.validate()?;
        }
        if nt == 0 {
            return Err(Error::invalid("nt", "simulation length must be positive"));
        }
        let last = base.n_layers() - 1;
        for (i, l) in base.layers.iter().enumerate() {
            if i < last && l.activation != Activation::Relu {
                return Err(Error::invalid(format!("layer {i}"), "hidden layers must be relu"));
            }
        }
        let shapes = base.layer_shapes()?;
        let cumulative = scales.cumulative();
        let mut layers = Vec::with_capacity(base.n_layers());
        let mut in_shape = base.input_shape.clone();
        for (i, l) in base.layers.iter().enumerate() {
            let w = l.weights.scale(scales.as_slice()[i]);
            let b = l.bias.scale(cumulative[i]);
            layers.push(match l.kind {
                LayerKind::Dense => SpikingLayer::Dense {
                    weights_t: tensor::transpose(&w)?.into_data(),
                    bias: b.into_data(),
                },
                LayerKind::Conv2d => {
                    let geom = ConvGeometry::new(&in_shape, w.shape(), l.stride)?;
                    let plane = geom.out_h * geom.out_w;
                    let bias_map = (0..geom.out_channels * plane)
                        .map(|k| b.data()[k / plane])
                        .collect();
                    SpikingLayer::Conv {
                        geom,
                        kernels: w,
                        bias: b,
                        bias_map,
                    }
                }
            });
            in_shape = shapes[i].clone();
        }
        let states = shapes
            .iter()
            .zip(&neurons)
            .enumerate()
            .map(|(i, (s, n))| LayerState::new(s, n, i as u64))
            .collect();
        Ok(SpikingNetwork {
            base,
            scales,
            neurons,
            states,
            layers,
            shapes,
            nt,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn base(&self) -> &NetworkDescription {
        &self.base
    }

    pub fn scales(&self) -> &ScaleVector {
        &self.scales
    }

    pub fn neurons(&self) -> &[NeuronConfig] {
        &self.neurons
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn n_actions(&self) -> usize {
        self.base.n_actions
    }

    /// Reseed the escape-noise stream. Only stochastic neurons consume it.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Effective (scaled) dense weights of layer `l` in `out x in` layout.
    pub fn effective_dense_weights(&self, l: usize) -> Option<Tensor> {
        match self.layers.get(l)? {
            SpikingLayer::Dense { weights_t, bias } => {
                let n_out = bias.len();
                let n_in = weights_t.len() / n_out;
                let t = Tensor::new(vec![n_in, n_out], weights_t.clone()).ok()?;
                tensor::transpose(&t).ok()
            }
            SpikingLayer::Conv { .. } => None,
        }
    }

    /// Constant current injected into layer `l` on every step, on top of
    /// synaptic input: the scaled bias.
    pub fn bias_current(&self, l: usize) -> Option<Vec<f32>> {
        Some(match self.layers.get(l)? {
            SpikingLayer::Dense { bias, .. } => bias.clone(),
            SpikingLayer::Conv { bias_map, .. } => bias_map.clone(),
        })
    }

    /// Reset potentials, reseed escape noise from `seed`, then simulate.
    pub fn forward_seeded(&mut self, observation: &Tensor, seed: u64) -> Result<SnnOutput> {
        self.reseed(seed);
        self.forward(observation)
    }

    /// Reset potentials and simulate `nt` steps on one observation. Escape
    /// noise continues from the network's stream.
    pub fn forward(&mut self, observation: &Tensor) -> Result<SnnOutput> {
        if observation.shape() != self.base.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "observation {:?} for network input {:?}",
                observation.shape(),
                self.base.input_shape
            )));
        }
        let n_layers = self.layers.len();
        for (i, (state, cfg)) in self.states.iter_mut().zip(&self.neurons).enumerate() {
            let layer_seed = self.rng.gen::<u64>() ^ i as u64;
            state.reset(cfg, Some(layer_seed));
        }

        // The first layer sees a constant current.
        let drive: Vec<f32> = match &self.layers[0] {
            SpikingLayer::Dense { weights_t, bias } => {
                let mut out = vec![0.0; bias.len()];
                tensor::dense_forward_sparse(observation.data(), weights_t, bias, &mut out);
                out
            }
            SpikingLayer::Conv {
                kernels,
                bias,
                geom,
                ..
            } => tensor::conv2d_forward(observation, kernels, bias, geom.stride)?.into_data(),
        };

        let mut counts: Vec<Vec<u32>> = self.layers.iter().map(|l| vec![0; l.n_out()]).collect();
        let mut prev: Vec<Vec<u32>> = vec![Vec::new(); n_layers];
        let mut next: Vec<Vec<u32>> = vec![Vec::new(); n_layers];
        let mut current: Vec<Vec<f32>> = self.layers.iter().map(|l| vec![0.0; l.n_out()]).collect();

        for _ in 0..self.nt {
            for l in 0..n_layers {
                let cur = &mut current[l];
                if l == 0 {
                    cur.copy_from_slice(&drive);
                } else {
                    match &self.layers[l] {
                        SpikingLayer::Dense { weights_t, bias } => {
                            cur.copy_from_slice(bias);
                            let n_out = bias.len();
                            for &src in &prev[l - 1] {
                                let src = src as usize;
                                tensor::axpy(1.0, &weights_t[src * n_out..(src + 1) * n_out], cur);
                            }
                        }
                        SpikingLayer::Conv {
                            geom,
                            kernels,
                            bias_map,
                            ..
                        } => {
                            cur.copy_from_slice(bias_map);
                            for &src in &prev[l - 1] {
                                tensor::conv2d_scatter(geom, kernels.data(), src as usize, 1.0, cur);
                            }
                        }
                    }
                }
                self.states[l].step_into(cur, &self.neurons[l], &mut next[l])?;
                for &i in &next[l] {
                    counts[l][i as usize] += 1;
                }
            }
            std::mem::swap(&mut prev, &mut next);
        }

        let q = counts[n_layers - 1].iter().map(|&c| c as f32).collect();
        Ok(SnnOutput {
            q_estimates: Tensor::vector(q),
            spike_counts: counts,
        })
    }

    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}

/// Convenience wrapper: simulate one observation.
pub fn snn_forward(snn: &mut SpikingNetwork, observation: &Tensor) -> Result<SnnOutput> {
    snn.forward(observation)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum Policy {
    Greedy,
    EpsilonGreedy { epsilon: f64 },
}

impl Policy {
    pub fn epsilon(&self) -> f64 {
        match self {
            Policy::Greedy => 0.0,
            Policy::EpsilonGreedy { epsilon } => *epsilon,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Greedy => "greedy".into(),
            Policy::EpsilonGreedy { epsilon } => format!("epsilon-greedy({epsilon})"),
        }
    }
}

/// Greedy picks the lowest-index maximum. Epsilon-greedy picks a uniform
/// random action with probability epsilon, otherwise greedy.
pub fn select_action<R: Rng + ?Sized>(q_estimates: &[f32], policy: Policy, rng: &mut R) -> Result<usize> {
    if q_estimates.is_empty() {
        return Err(Error::invalid("q estimates", "empty"));
    }
    match policy {
        Policy::Greedy => Ok(tensor::argmax(q_estimates)),
        Policy::EpsilonGreedy { epsilon } => {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(Error::invalid("epsilon", format!("{epsilon} outside [0, 1]")));
            }
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                Ok(rng.gen_range(0..q_estimates.len()))
            } else {
                Ok(tensor::argmax(q_estimates))
            }
        }
    }
}
