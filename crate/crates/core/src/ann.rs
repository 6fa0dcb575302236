//! ReLU Q-networks: layer descriptions, presets and forward inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Number of Breakout actions: noop, fire, right, left.
pub const N_ACTIONS: usize = 4;
pub const SHALLOW_HIDDEN: usize = 1000;
pub const FRAME_SIZE: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Dense: `out x in`. Conv: `K x C x kh x kw`.
    pub weights: Tensor,
    pub bias: Tensor,
    /// Ignored for dense layers.
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(weights: Tensor, bias: Tensor, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            weights,
            bias,
            stride: 1,
            activation,
        }
    }

    pub fn conv2d(weights: Tensor, bias: Tensor, stride: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            weights,
            bias,
            stride,
            activation,
        }
    }

    /// Output shape given the layer's input shape.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => {
                let w = self.weights.shape();
                if w.len() != 2 {
                    return Err(Error::dim(format!("dense weights {:?} must be 2-D", w)));
                }
                let n_in: usize = input_shape.iter().product();
                if w[1] != n_in {
                    return Err(Error::dim(format!(
                        "dense weights {:?} cannot take input {:?}",
                        w, input_shape
                    )));
                }
                if self.bias.len() != w[0] {
                    return Err(Error::dim(format!(
                        "dense bias {:?} does not match weights {:?}",
                        self.bias.shape(),
                        w
                    )));
                }
                Ok(vec![w[0]])
            }
            LayerKind::Conv2d => {
                let g = ConvGeometry::new(input_shape, self.weights.shape(), self.stride)?;
                if self.bias.len() != g.out_channels {
                    return Err(Error::dim(format!(
                        "conv bias {:?} does not match kernels {:?}",
                        self.bias.shape(),
                        self.weights.shape()
                    )));
                }
                Ok(g.output_shape().to_vec())
            }
        }
    }

    /// Pre-activation output for `input`.
    pub fn linear(&self, input: &Tensor) -> Result<Tensor> {
        match self.kind {
            LayerKind::Dense => {
                let flat = input.clone().reshape(vec![input.len()])?;
                tensor::dense_forward(&flat, &self.weights, &self.bias)
            }
            LayerKind::Conv2d => {
                tensor::conv2d_forward(input, &self.weights, &self.bias, self.stride)
            }
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let z = self.linear(input)?;
        Ok(match self.activation {
            Activation::Relu => tensor::relu(&z),
            Activation::Identity => z,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDescription {
    pub input_shape: Vec<usize>,
    pub n_actions: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkDescription {
    pub fn new(input_shape: Vec<usize>, n_actions: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = NetworkDescription {
            input_shape,
            n_actions,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network", "no layers"));
        }
        if self.n_actions == 0 {
            return Err(Error::invalid("network", "n_actions must be positive"));
        }
        let last = self.layers.len() - 1;
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::invalid(format!("layer {i}"), e.to_string()))?;
            if !layer.weights.all_finite() || !layer.bias.all_finite() {
                return Err(Error::invalid(format!("layer {i}"), "non-finite parameters"));
            }
            let want = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            if layer.activation != want {
                return Err(Error::invalid(
                    format!("layer {i}"),
                    format!("expected {want:?} activation, found {:?}", layer.activation),
                ));
            }
        }
        if shape != [self.n_actions] {
            return Err(Error::invalid(
                format!("layer {last}"),
                format!("output shape {:?} but n_actions = {}", shape, self.n_actions),
            ));
        }
        Ok(())
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// 80x80 input, one hidden layer, linear Q head.
    pub fn shallow(hidden: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = FRAME_SIZE * FRAME_SIZE;
        let layers = vec![
            LayerSpec::dense(
                he_uniform(&mut rng, vec![hidden, n_in], n_in),
                Tensor::zeros(&[hidden]),
                Activation::Relu,
            ),
            LayerSpec::dense(
                he_uniform(&mut rng, vec![n_actions, hidden], hidden),
                Tensor::zeros(&[n_actions]),
                Activation::Identity,
            ),
        ];
        NetworkDescription::new(vec![FRAME_SIZE, FRAME_SIZE], n_actions, layers)
            .expect("shallow preset is well formed")
    }

    pub fn shallow_preset(seed: u64) -> Self {
        Self::shallow(SHALLOW_HIDDEN, N_ACTIONS, seed)
    }

    /// The Atari DQN stack: 4x84x84 -> 32@8x8/4 -> 64@4x4/2 -> 64@3x3/1 -> 512 -> n_actions.
    pub fn deep_preset(n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |k: usize, c: usize, size: usize, stride: usize| {
            let fan_in = c * size * size;
            LayerSpec::conv2d(
                he_uniform(&mut rng, vec![k, c, size, size], fan_in),
                Tensor::zeros(&[k]),
                stride,
                Activation::Relu,
            )
        };
        let mut layers = vec![conv(32, 4, 8, 4), conv(64, 32, 4, 2), conv(64, 64, 3, 1)];
        let flat = 64 * 7 * 7;
        layers.push(LayerSpec::dense(
            he_uniform(&mut rng, vec![512, flat], flat),
            Tensor::zeros(&[512]),
            Activation::Relu,
        ));
        layers.push(LayerSpec::dense(
            he_uniform(&mut rng, vec![n_actions, 512], 512),
            Tensor::zeros(&[n_actions]),
            Activation::Identity,
        ));
        NetworkDescription::new(vec![4, 84, 84], n_actions, layers)
            .expect("deep preset is well formed")
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Q-values for one observation.
pub fn ann_forward(net: &NetworkDescription, observation: &Tensor) -> Result<Tensor> {
    Ok(ann_activations(net, observation)?
        .pop()
        .expect("networks have at least one layer"))
}

/// Post-activation output of every layer.
pub fn ann_activations(net: &NetworkDescription, observation: &Tensor) -> Result<Vec<Tensor>> {
    if observation.shape() != net.input_shape.as_slice() {
        return Err(Error::dim(format!(
            "observation {:?} for network input {:?}",
            observation.shape(),
            net.input_shape
        )));
    }
    let mut outs: Vec<Tensor> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let input = outs.last().unwrap_or(observation);
        let out = layer.apply(input)?;
        outs.push(out);
    }
    Ok(outs)
}

/// Inference form of a network: dense weights are stored input-major so a
/// forward pass touches only the fan-out of non-zero inputs. Produces the
/// same bits as [`ann_forward`].
#[derive(Clone, Debug)]
pub struct CompiledNet {
    input_shape: Vec<usize>,
    layers: Vec<CompiledLayer>,
}

#[derive(Clone, Debug)]
enum CompiledLayer {
    Dense {
        weights_t: Vec<f32>,
        bias: Vec<f32>,
        relu: bool,
    },
    Conv {
        spec: LayerSpec,
        in_shape: Vec<usize>,
    },
}

impl CompiledNet {
    pub fn new(net: &NetworkDescription) -> Result<Self> {
        net.validate()?;
        let mut layers = Vec::with_capacity(net.layers.len());
        let mut shape = net.input_shape.clone();
        for layer in &net.layers {
            let relu = layer.activation == Activation::Relu;
            layers.push(match layer.kind {
                LayerKind::Dense => CompiledLayer::Dense {
                    weights_t: tensor::transpose(&layer.weights)?.into_data(),
                    bias: layer.bias.data().to_vec(),
                    relu,
                },
                LayerKind::Conv2d => CompiledLayer::Conv {
                    spec: layer.clone(),
                    in_shape: shape.clone(),
                },
            });
            shape = layer.output_shape(&shape)?;
        }
        Ok(CompiledNet {
            input_shape: net.input_shape.clone(),
            layers,
        })
    }

    pub fn forward(&self, observation: &[f32]) -> Result<Vec<f32>> {
        let expected: usize = self.input_shape.iter().product();
        if observation.len() != expected {
            return Err(Error::dim(format!(
                "observation of {} values for network input {:?}",
                observation.len(),
                self.input_shape
            )));
        }
        let mut x = observation.to_vec();
        for layer in &self.layers {
            x = match layer {
                CompiledLayer::Dense {
                    weights_t,
                    bias,
                    relu,
                } => {
                    let mut out = vec![0.0; bias.len()];
                    tensor::dense_forward_sparse(&x, weights_t, bias, &mut out);
                    if *relu {
                        tensor::relu_in_place(&mut out);
                    }
                    out
                }
                CompiledLayer::Conv { spec, in_shape } => {
                    let input = Tensor::new(in_shape.clone(), x)?;
                    spec.apply(&input)?.into_data()
                }
            };
        }
        Ok(x)
    }
}
