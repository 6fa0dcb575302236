//! Discrete-time spiking neuron models.
//!
//! All four models integrate with forward Euler. The threshold test happens
//! after integration in the same step, and there is no refractory period.
//!
//! | kind            | update                               | spike                 | reset                   |
//! |-----------------|--------------------------------------|-----------------------|-------------------------|
//! | `If`            | `v += dt/tau * I`                    | `v >= v_thresh`       | `v = v_reset`           |
//! | `SubIf`         | `v += dt/tau * I`                    | `v >= v_thresh`       | `v = v_reset + (v - θ)` |
//! | `Lif`           | `v += dt/tau * (-(v - v_rest) + I)`  | `v >= v_thresh`       | `v = v_reset`           |
//! | `StochasticLif` | as `Lif`                             | with probability σ(v) | `v = v_reset`           |
//!
//! with `σ(v) = min(1, exp(beta_sigma * (v - v_thresh)) / tau_sigma)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronKind {
    If,
    SubIf,
    Lif,
    StochasticLif,
}

impl NeuronKind {
    pub const ALL: [NeuronKind; 4] = [
        NeuronKind::If,
        NeuronKind::SubIf,
        NeuronKind::Lif,
        NeuronKind::StochasticLif,
    ];

    pub fn is_leaky(self) -> bool {
        matches!(self, NeuronKind::Lif | NeuronKind::StochasticLif)
    }

    pub fn is_stochastic(self) -> bool {
        self == NeuronKind::StochasticLif
    }

    pub fn name(self) -> &'static str {
        match self {
            NeuronKind::If => "if",
            NeuronKind::SubIf => "sub-if",
            NeuronKind::Lif => "lif",
            NeuronKind::StochasticLif => "stochastic-lif",
        }
    }
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeuronKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "if" => Ok(NeuronKind::If),
            "sub-if" | "subif" => Ok(NeuronKind::SubIf),
            "lif" => Ok(NeuronKind::Lif),
            "stochastic-lif" | "stochasticlif" | "slif" => Ok(NeuronKind::StochasticLif),
            other => Err(Error::invalid("neuron kind", format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    pub v_rest: f32,
    pub v_thresh: f32,
    pub v_reset: f32,
    pub tau: f32,
    pub tau_sigma: f32,
    pub beta_sigma: f32,
    pub dt: f32,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig::new(NeuronKind::SubIf)
    }
}

/// Membrane time constant used for the leaky kinds unless overridden.
pub const DEFAULT_LEAKY_TAU: f32 = 20.0;

impl NeuronConfig {
    /// Canonical constants: rest 0, reset 0, threshold 1, unit step.
    /// Leaky kinds get `tau = DEFAULT_LEAKY_TAU`; with `tau == dt` a leaky
    /// neuron forgets its whole potential every step.
    pub fn new(kind: NeuronKind) -> Self {
        NeuronConfig {
            kind,
            v_rest: 0.0,
            v_thresh: 1.0,
            v_reset: 0.0,
            tau: if kind.is_leaky() { DEFAULT_LEAKY_TAU } else { 1.0 },
            tau_sigma: 1.0,
            beta_sigma: 1.0,
            dt: 1.0,
        }
    }

    pub fn with_tau(mut self, tau: f32) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("neuron config", msg));
        let all = [
            self.v_rest,
            self.v_thresh,
            self.v_reset,
            self.tau,
            self.tau_sigma,
            self.beta_sigma,
            self.dt,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite parameter in {self:?}"));
        }
        if self.v_thresh <= self.v_reset || self.v_thresh <= self.v_rest {
            return bad(format!(
                "v_thresh ({}) must exceed v_reset ({}) and v_rest ({})",
                self.v_thresh, self.v_reset, self.v_rest
            ));
        }
        if self.tau <= 0.0 || self.dt <= 0.0 {
            return bad(format!("tau ({}) and dt ({}) must be positive", self.tau, self.dt));
        }
        if self.tau_sigma <= 0.0 || self.beta_sigma <= 0.0 {
            return bad(format!(
                "tau_sigma ({}) and beta_sigma ({}) must be positive",
                self.tau_sigma, self.beta_sigma
            ));
        }
        Ok(())
    }

    /// Escape-noise firing probability at potential `v`.
    pub fn escape_probability(&self, v: f32) -> f32 {
        let sigma = (self.beta_sigma * (v - self.v_thresh)).exp() / self.tau_sigma;
        if sigma < 1.0 {
            sigma
        } else {
            1.0
        }
    }
}

/// Membrane potentials of one layer plus the generator driving escape noise.
#[derive(Clone, Debug)]
pub struct LayerState {
    v: Tensor,
    rng: ChaCha8Rng,
}

impl LayerState {
    pub fn new(shape: &[usize], config: &NeuronConfig, seed: u64) -> Self {
        LayerState {
            v: Tensor::full(shape, config.v_rest),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn potentials(&self) -> &Tensor {
        &self.v
    }

    pub fn potentials_mut(&mut self) -> &mut [f32] {
        self.v.data_mut()
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Back to `v_rest`; optionally reseed the escape-noise generator.
    pub fn reset(&mut self, config: &NeuronConfig, seed: Option<u64>) {
        self.v.data_mut().fill(config.v_rest);
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
    }

    /// Advance one step with `current` and push the flat indices of neurons
    /// that fired into `spiked` (cleared first).
    pub fn step_into(
        &mut self,
        current: &[f32],
        config: &NeuronConfig,
        spiked: &mut Vec<u32>,
    ) -> Result<()> {
        if current.len() != self.v.len() {
            return Err(Error::dim(format!(
                "input current of length {} for layer {:?}",
                current.len(),
                self.v.shape()
            )));
        }
        spiked.clear();
        let gain = config.dt / config.tau;
        let v = self.v.data_mut();
        match config.kind {
            NeuronKind::If | NeuronKind::SubIf => {
                let subtractive = config.kind == NeuronKind::SubIf;
                for (idx, (vi, &i)) in v.iter_mut().zip(current).enumerate() {
                    *vi += gain * i;
                    if *vi >= config.v_thresh {
                        *vi = if subtractive {
                            config.v_reset + (*vi - config.v_thresh)
                        } else {
                            config.v_reset
                        };
                        spiked.push(idx as u32);
                    }
                }
            }
            NeuronKind::Lif => {
                for (idx, (vi, &i)) in v.iter_mut().zip(current).enumerate() {
                    *vi += gain * (-(*vi - config.v_rest) + i);
                    if *vi >= config.v_thresh {
                        *vi = config.v_reset;
                        spiked.push(idx as u32);
                    }
                }
            }
            NeuronKind::StochasticLif => {
                for (idx, (vi, &i)) in v.iter_mut().zip(current).enumerate() {
                    *vi += gain * (-(*vi - config.v_rest) + i);
                    let u: f32 = self.rng.gen();
                    if vi.is_finite() && u < config.escape_probability(*vi) {
                        *vi = config.v_reset;
                        spiked.push(idx as u32);
                    }
                }
            }
        }
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NumericOverflow { index, value });
        }
        Ok(())
    }
}

/// One simulation step. Returns a 0/1 tensor shaped like the layer.
pub fn step(state: &mut LayerState, input_current: &Tensor, config: &NeuronConfig) -> Result<Tensor> {
    if input_current.shape() != state.v.shape() {
        return Err(Error::dim(format!(
            "input current {:?} for layer {:?}",
            input_current.shape(),
            state.v.shape()
        )));
    }
    let mut spiked = Vec::new();
    state.step_into(input_current.data(), config, &mut spiked)?;
    let mut out = Tensor::zeros(state.v.shape());
    for i in spiked {
        out.data_mut()[i as usize] = 1.0;
    }
    Ok(out)
}

/// Spikes emitted by a single neuron driven by a constant current for `nt`
/// steps, starting from rest.
pub fn constant_input_rate(current: f32, config: &NeuronConfig, nt: usize, seed: u64) -> Result<usize> {
    let mut state = LayerState::new(&[1], config, seed);
    let input = [current];
    let mut spiked = Vec::with_capacity(1);
    let mut count = 0;
    for _ in 0..nt {
        state.step_into(&input, config, &mut spiked)?;
        count += spiked.len();
    }
    Ok(count)
}
