//! Search for per-layer weight scales: particle swarm, exhaustive grid, and
//! activation-percentile normalization.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{ann_activations, NetworkDescription};
use crate::error::{Error, Result};
use crate::eval::{run_episodes, Agent, EpisodeSpec};
use crate::neuron::NeuronConfig;
use crate::snn::{convert, ScaleVector};
use crate::tensor::Tensor;

/// Clerc's constriction coefficients.
pub const INERTIA: f64 = 0.7298;
pub const ACCELERATION: f64 = 1.49618;

/// `10 + 2 sqrt(D)`, rounded to the nearest integer: 13 for two layers, 14
/// for five.
pub fn default_swarm_size(dims: usize) -> usize {
    10 + (2.0 * (dims as f64).sqrt()).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Linear,
    /// Positions live in `ln(x)`, so multiplicative ranges are searched evenly.
    Log,
}

impl Axis {
    fn to_search(self, x: f64) -> f64 {
        match self {
            Axis::Linear => x,
            Axis::Log => x.ln(),
        }
    }

    fn from_search(self, u: f64) -> f64 {
        match self {
            Axis::Linear => u,
            Axis::Log => u.exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmConfig {
    pub dims: usize,
    pub swarm_size: usize,
    pub iterations: usize,
    pub low: f64,
    pub high: f64,
    pub axis: Axis,
    pub inertia: f64,
    pub c1: f64,
    pub c2: f64,
    pub fitness_episodes: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig::new(2)
    }
}

impl SwarmConfig {
    pub fn new(dims: usize) -> Self {
        SwarmConfig {
            dims,
            swarm_size: default_swarm_size(dims),
            iterations: 20,
            low: 0.1,
            high: 100.0,
            axis: Axis::Log,
            inertia: INERTIA,
            c1: ACCELERATION,
            c2: ACCELERATION,
            fitness_episodes: 100,
            seed: 0,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("swarm config", m));
        if self.dims == 0 {
            return bad("dims must be positive".into());
        }
        if self.swarm_size < 2 {
            return bad(format!("swarm size {} < 2", self.swarm_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.low < self.high) || (self.axis == Axis::Log && self.low <= 0.0) {
            return bad(format!("bounds [{}, {}]", self.low, self.high));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    /// Search-space coordinates (see [`Axis`]).
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoResult {
    /// Best point in problem coordinates.
    pub best: Vec<f64>,
    pub best_fitness: f64,
    /// Global best after initialization, then after every iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub particles: Vec<Particle>,
}

fn evaluate_all<F>(points: &[Vec<f64>], axis: Axis, parallel: bool, fitness: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let eval = |u: &Vec<f64>| {
        let x: Vec<f64> = u.iter().map(|&v| axis.from_search(v)).collect();
        fitness(&x)
    };
    if parallel {
        points.par_iter().map(eval).collect()
    } else {
        points.iter().map(eval).collect()
    }
}

/// Global-best PSO maximizing `fitness`. `seeds` (problem coordinates) replace
/// the first random initial positions. Random draws depend only on
/// `config.seed`, so parallel and serial evaluation give the same result.
pub fn pso_optimize<F>(config: &SwarmConfig, seeds: &[Vec<f64>], fitness: F) -> Result<PsoResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    config.validate()?;
    let axis = config.axis;
    let (lo, hi) = (axis.to_search(config.low), axis.to_search(config.high));
    let span = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut positions: Vec<Vec<f64>> = (0..config.swarm_size)
        .map(|_| (0..config.dims).map(|_| rng.gen_range(lo..=hi)).collect())
        .collect();
    for (p, s) in positions.iter_mut().zip(seeds) {
        if s.len() != config.dims {
            return Err(Error::dim(format!("seed point of {} dims, expected {}", s.len(), config.dims)));
        }
        *p = s.iter().map(|&x| axis.to_search(x).clamp(lo, hi)).collect();
    }
    let velocities: Vec<Vec<f64>> = positions
        .iter()
        .map(|p| p.iter().map(|&x| rng.gen_range((lo - x)..=(hi - x)) / 2.0).collect())
        .collect();

    let fit = evaluate_all(&positions, axis, config.parallel, &fitness)?;
    let mut evaluations = fit.len();
    let mut particles: Vec<Particle> = positions
        .into_iter()
        .zip(velocities)
        .zip(&fit)
        .map(|((position, velocity), &f)| Particle {
            best_position: position.clone(),
            position,
            velocity,
            best_fitness: f,
        })
        .collect();
    let mut g = best_index(&particles);
    let mut gbest = particles[g].best_position.clone();
    let mut gbest_fit = particles[g].best_fitness;
    let mut history = vec![gbest_fit];

    for _ in 0..config.iterations {
        for p in particles.iter_mut() {
            for d in 0..config.dims {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                let v = config.inertia * p.velocity[d]
                    + config.c1 * r1 * (p.best_position[d] - p.position[d])
                    + config.c2 * r2 * (gbest[d] - p.position[d]);
                let v = v.clamp(-span, span);
                let x = p.position[d] + v;
                if x < lo || x > hi {
                    p.position[d] = x.clamp(lo, hi);
                    p.velocity[d] = 0.0;
                } else {
                    p.position[d] = x;
                    p.velocity[d] = v;
                }
            }
        }
        let points: Vec<Vec<f64>> = particles.iter().map(|p| p.position.clone()).collect();
        let fit = evaluate_all(&points, axis, config.parallel, &fitness)?;
        evaluations += fit.len();
        for (p, &f) in particles.iter_mut().zip(&fit) {
            if f > p.best_fitness {
                p.best_fitness = f;
                p.best_position = p.position.clone();
            }
        }
        g = best_index(&particles);
        if particles[g].best_fitness > gbest_fit {
            gbest_fit = particles[g].best_fitness;
            gbest = particles[g].best_position.clone();
        }
        history.push(gbest_fit);
    }
    Ok(PsoResult {
        best: gbest.iter().map(|&u| axis.from_search(u)).collect(),
        best_fitness: gbest_fit,
        history,
        evaluations,
        particles,
    })
}

/// First particle with the highest personal best.
fn best_index(particles: &[Particle]) -> usize {
    let mut best = 0;
    for (i, p) in particles.iter().enumerate() {
        if p.best_fitness > particles[best].best_fitness {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Vec<f64>,
    pub best_fitness: f64,
    pub evaluations: usize,
}

/// Grid coordinates along one axis. A single step yields `low`.
pub fn grid_axis(low: f64, high: f64, steps: usize, axis: Axis) -> Vec<f64> {
    if steps == 1 {
        return vec![low];
    }
    let (a, b) = (axis.to_search(low), axis.to_search(high));
    (0..steps)
        .map(|i| {
            if i == steps - 1 {
                high
            } else if i == 0 {
                low
            } else {
                axis.from_search(a + (b - a) * i as f64 / (steps - 1) as f64)
            }
        })
        .collect()
}

/// Evaluate every point of the Cartesian grid and return the best. Ties go
/// to the lexicographically smallest point.
pub fn grid_search<F>(axes: &[Vec<f64>], cap: usize, parallel: bool, fitness: F) -> Result<GridResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
        return Err(Error::invalid("grid", "every dimension needs at least one step"));
    }
    let total = axes
        .iter()
        .try_fold(1usize, |acc, a| acc.checked_mul(a.len()))
        .unwrap_or(usize::MAX);
    if total > cap {
        return Err(Error::invalid(
            "grid",
            format!("{total} points exceeds the cap of {cap}"),
        ));
    }
    let mut points: Vec<Vec<f64>> = (0..total)
        .map(|mut k| {
            let mut p = vec![0.0; axes.len()];
            for d in (0..axes.len()).rev() {
                p[d] = axes[d][k % axes[d].len()];
                k /= axes[d].len();
            }
            p
        })
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let fit = evaluate_all(&points, Axis::Linear, parallel, &fitness)?;
    let mut best = 0;
    for (i, &f) in fit.iter().enumerate() {
        if f > fit[best] {
            best = i;
        }
    }
    Ok(GridResult {
        best: points[best].clone(),
        best_fitness: fit[best],
        evaluations: total,
    })
}

/// Mean total reward of the network converted with `scales`, over a fixed
/// episode seed list derived from `master`.
pub fn fitness(
    net: &NetworkDescription,
    scales: &ScaleVector,
    neuron: NeuronConfig,
    nt: usize,
    spec: &EpisodeSpec,
    master: u64,
    episodes: usize,
) -> Result<f64> {
    let snn = convert(net, scales, neuron, nt)?;
    let eps = run_episodes(&Agent::Snn(Box::new(snn)), spec, master, episodes)?;
    Ok(eps.iter().map(|e| e.reward as f64).sum::<f64>() / episodes.max(1) as f64)
}

/// Linear-interpolated `p`-th percentile (0..=100) of `values`.
pub fn percentile(values: &mut [f32], p: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let (i, frac) = (rank.floor() as usize, rank.fract() as f32);
    let lo = values[i];
    let hi = values[(i + 1).min(values.len() - 1)];
    Some(lo + (hi - lo) * frac)
}

/// Where the activation chain starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "reference", content = "value")]
pub enum InputReference {
    /// Percentile of the positive input values.
    Percentile,
    /// A fixed value, typically the firing threshold.
    Fixed(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub scales: ScaleVector,
    /// `lambda[0]` is the input reference, `lambda[l + 1]` layer `l`'s.
    pub lambdas: Vec<f32>,
    pub warnings: Vec<String>,
}

/// Percentile normalization with the input percentile as reference.
pub fn normalize_scales(net: &NetworkDescription, samples: &[Tensor], p: f64) -> Result<ScaleVector> {
    Ok(normalize_scales_with(net, samples, p, InputReference::Percentile)?.scales)
}

/// `scale_l = lambda_{l-1} / lambda_l` where `lambda_l` is the `p`-th
/// percentile of layer `l`'s positive activations over `samples`. A layer
/// that never activates keeps scale 1.
pub fn normalize_scales_with(
    net: &NetworkDescription,
    samples: &[Tensor],
    p: f64,
    reference: InputReference,
) -> Result<Normalization> {
    if samples.is_empty() {
        return Err(Error::invalid("normalization samples", "empty sample set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid("percentile", format!("{p} outside [0, 100]")));
    }
    let n = net.n_layers();
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut inputs = Vec::new();
    for s in samples {
        if reference == InputReference::Percentile {
            inputs.extend(s.data().iter().copied().filter(|&v| v > 0.0));
        }
        for (l, a) in ann_activations(net, s)?.iter().enumerate() {
            per_layer[l].extend(a.data().iter().copied().filter(|&v| v > 0.0));
        }
    }
    let mut warnings = Vec::new();
    let lambda0 = match reference {
        InputReference::Fixed(v) => v,
        InputReference::Percentile => percentile(&mut inputs, p).unwrap_or_else(|| {
            warnings.push("input: all samples are zero, reference 1".to_string());
            1.0
        }),
    };
    let mut lambdas = vec![lambda0];
    let mut scales = Vec::with_capacity(n);
    for (l, acts) in per_layer.iter_mut().enumerate() {
        let prev = lambdas[l];
        match percentile(acts, p).filter(|&v| v > 0.0) {
            Some(lam) => {
                scales.push(prev / lam);
                lambdas.push(lam);
            }
            None => {
                warnings.push(format!("layer {l}: no positive activations, scale 1"));
                scales.push(1.0);
                lambdas.push(prev);
            }
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Normalization {
        scales: ScaleVector::new(scales)?,
        lambdas,
        warnings,
    })
}

/// File written by the optimizer and read back by `convert`/`evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalesFile {
    pub scales: ScaleVector,
    pub fitness: Option<f64>,
    #[serde(default)]
    pub history: Vec<f64>,
    pub config: serde_json::Value,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{Activation, LayerSpec};

    fn sphere(target: &[f64]) -> impl Fn(&[f64]) -> Result<f64> + Sync + '_ {
        move |x: &[f64]| Ok(-x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    #[test]
    fn swarm_sizes() {
        assert_eq!(default_swarm_size(2), 13);
        assert_eq!(default_swarm_size(5), 14);
        assert_eq!(default_swarm_size(1), 12);
        assert_eq!(default_swarm_size(4), 14);
    }

    #[test]
    fn pso_finds_sphere_optimum() {
        let target = [2.0, 5.0];
        let mut cfg = SwarmConfig::new(2);
        cfg.iterations = 50;
        let r = pso_optimize(&cfg, &[], sphere(&target)).unwrap();
        assert!(r.best.iter().zip(&target).all(|(a, b)| (a - b).abs() < 0.05), "{:?}", r.best);
        assert_eq!(r.history.len(), 51);
        assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(r.evaluations, 13 * 51);
    }

    #[test]
    fn parallel_matches_serial() {
        let target = [0.7, 30.0, 3.0];
        let mut cfg = SwarmConfig::new(3);
        cfg.iterations = 10;
        let a = pso_optimize(&cfg, &[], sphere(&target)).unwrap();
        cfg.parallel = false;
        let b = pso_optimize(&cfg, &[], sphere(&target)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positions_respect_bounds() {
        let mut cfg = SwarmConfig::new(2);
        cfg.iterations = 5;
        let r = pso_optimize(&cfg, &[], sphere(&[1000.0, 0.001])).unwrap();
        let (lo, hi) = (cfg.low.ln(), cfg.high.ln());
        for p in &r.particles {
            assert!(p.position.iter().all(|&u| (lo..=hi).contains(&u)));
        }
    }

    #[test]
    fn seeded_particle_bounds_the_result() {
        let target = [3.0, 3.0];
        let mut cfg = SwarmConfig::new(2);
        cfg.iterations = 1;
        let r = pso_optimize(&cfg, &[target.to_vec()], sphere(&target)).unwrap();
        assert!(r.best_fitness > -1e-9);
    }

    #[test]
    fn grid_cases() {
        let one = grid_search(&[vec![0.5], vec![2.0]], 10, false, sphere(&[0.0, 0.0])).unwrap();
        assert_eq!((one.best, one.evaluations), (vec![0.5, 2.0], 1));
        let axes = vec![grid_axis(1.0, 5.0, 5, Axis::Linear), grid_axis(1.0, 5.0, 3, Axis::Linear)];
        let r = grid_search(&axes, 100, true, sphere(&[2.0, 3.0])).unwrap();
        assert_eq!(r.best, vec![2.0, 3.0]);
        assert_eq!(r.evaluations, 15);
        assert!(grid_search(&axes, 14, true, sphere(&[2.0, 3.0])).is_err());
        // flat objective: lexicographically smallest point
        let flat = grid_search(&axes, 100, true, |_: &[f64]| Ok(1.0)).unwrap();
        assert_eq!(flat.best, vec![1.0, 1.0]);
    }

    #[test]
    fn log_axis_endpoints() {
        let a = grid_axis(0.1, 100.0, 4, Axis::Log);
        assert_eq!(a[0], 0.1);
        assert_eq!(a[3], 100.0);
        assert!((a[1] - 1.0).abs() < 1e-9 && (a[2] - 10.0).abs() < 1e-9);
    }

    fn two_unit_net() -> NetworkDescription {
        // hidden = (2x, x), output = h0 + h1
        let l0 = LayerSpec::dense(
            Tensor::new(vec![2, 1], vec![2.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
            Activation::Relu,
        );
        let l1 = LayerSpec::dense(
            Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(&[1]),
            Activation::Identity,
        );
        NetworkDescription::new(vec![1], 1, vec![l0, l1]).unwrap()
    }

    #[test]
    fn normalization_by_hand() {
        let net = two_unit_net();
        let samples: Vec<Tensor> = [0.5f32, 1.0, 2.0].iter().map(|&x| Tensor::vector(vec![x])).collect();
        let n = normalize_scales_with(&net, &samples, 100.0, InputReference::Percentile).unwrap();
        // input max 2, hidden max 4, output max 6
        assert_eq!(n.lambdas, vec![2.0, 4.0, 6.0]);
        assert_eq!(n.scales.as_slice(), &[0.5, 4.0 / 6.0]);
        let fixed = normalize_scales_with(&net, &samples, 100.0, InputReference::Fixed(1.0)).unwrap();
        assert_eq!(fixed.scales.as_slice(), &[0.25, 4.0 / 6.0]);
    }

    #[test]
    fn zero_samples_fall_back_to_unit_scales() {
        let net = two_unit_net();
        let n = normalize_scales_with(&net, &[Tensor::vector(vec![0.0])], 99.9, InputReference::Percentile).unwrap();
        assert_eq!(n.scales.as_slice(), &[1.0, 1.0]);
        assert_eq!(n.warnings.len(), 3);
        assert!(normalize_scales(&net, &[], 99.9).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 100.0), Some(4.0));
        assert_eq!(percentile(&mut v, 0.0), Some(1.0));
        assert_eq!(percentile(&mut v, 50.0), Some(2.5));
        assert_eq!(percentile(&mut [], 50.0), None);
    }
}
