//! Subcommand orchestration behind the `qspike` binary. Every command takes a
//! fully resolved settings struct, writes its artifacts into an output
//! directory, and records a manifest from which the run can be repeated.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ann::NetworkDescription;
use crate::dqn::{train_with, TrainerConfig};
use crate::env::{EnvConfig, InputMode, OCCLUSION_POSITIONS};
use crate::error::{Error, Result};
use crate::eval::{
    collect_states, episode_seed, evaluate, occlusion_sweep, run_episode_observed, write_comparison_csv,
    write_sweep_csv, Agent, EpisodeSpec, EvalReport, NetKind, SweepRow,
};
use crate::neuron::NeuronConfig;
use crate::optimize::{
    fitness, grid_axis, grid_search, normalize_scales_with, pso_optimize, Axis, InputReference, ScalesFile,
    SwarmConfig,
};
use crate::snn::{convert, Policy, ScaleVector, DEFAULT_NT};
use crate::weights_io::{load_weights, save_weights};

pub const DEFAULT_EVAL_EPSILON: f64 = 0.05;

fn default_eval_policy() -> Policy {
    Policy::EpsilonGreedy {
        epsilon: DEFAULT_EVAL_EPSILON,
    }
}

/// Parse `greedy`, `epsilon-greedy` or a bare epsilon.
pub fn parse_policy(name: &str, epsilon: Option<f64>) -> Result<Policy> {
    match name {
        "greedy" => {
            if epsilon.is_some() {
                return Err(Error::Usage("--epsilon given with a greedy policy".into()));
            }
            Ok(Policy::Greedy)
        }
        "epsilon-greedy" | "epsilon" | "eps" => Ok(Policy::EpsilonGreedy {
            epsilon: epsilon.unwrap_or(DEFAULT_EVAL_EPSILON),
        }),
        other => match other.parse::<f64>() {
            Ok(e) => Ok(Policy::EpsilonGreedy { epsilon: e }),
            Err(_) => Err(Error::Usage(format!("unknown policy '{other}' (greedy|epsilon-greedy)"))),
        },
    }
}

fn check_policy(p: Policy) -> Result<()> {
    match p {
        Policy::EpsilonGreedy { epsilon } if !(0.0..=1.0).contains(&epsilon) => {
            Err(Error::Usage(format!("epsilon {epsilon} outside [0, 1]")))
        }
        _ => Ok(()),
    }
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Usage(format!("{flag} is required")));
    }
    if !path.exists() {
        return Err(Error::Usage(format!("{}: no such file", path.display())));
    }
    Ok(())
}

/// Which trained network to run and, for the spiking twin, how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSettings {
    pub weights: PathBuf,
    pub network: NetKind,
    pub scales: Option<PathBuf>,
    pub neuron: NeuronConfig,
    pub nt: usize,
}

impl Default for NetSettings {
    fn default() -> Self {
        NetSettings {
            weights: PathBuf::new(),
            network: NetKind::Ann,
            scales: None,
            neuron: NeuronConfig::default(),
            nt: DEFAULT_NT,
        }
    }
}

impl NetSettings {
    fn validate(&self) -> Result<()> {
        if self.network != NetKind::Zero {
            require(&self.weights, "--weights")?;
        }
        if self.network == NetKind::Snn && self.scales.is_none() {
            return Err(Error::Usage("an snn network needs --scales".into()));
        }
        if let Some(s) = &self.scales {
            require(s, "--scales")?;
        }
        Ok(())
    }

    pub fn agent(&self, kind: NetKind) -> Result<Agent> {
        match kind {
            NetKind::Zero => Ok(Agent::Zero { n_actions: 4 }),
            NetKind::Ann => Agent::ann(&load_weights(&self.weights)?),
            NetKind::Snn => {
                let path = self
                    .scales
                    .as_ref()
                    .ok_or_else(|| Error::Usage("an snn network needs --scales".into()))?;
                let scales = read_scales(path)?;
                let net = load_weights(&self.weights)?;
                Ok(Agent::Snn(Box::new(convert(&net, &scales.scales, self.neuron, self.nt)?)))
            }
        }
    }
}

pub fn read_scales(path: &Path) -> Result<ScalesFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    #[serde(flatten)]
    pub net: NetSettings,
    pub policy: Policy,
    pub episodes: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    /// Also dump every step as JSON lines to `trace.jsonl`.
    pub trace: bool,
    pub env: EnvConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            net: NetSettings::default(),
            policy: default_eval_policy(),
            episodes: 100,
            input_mode: InputMode::Grayscale,
            seed: 0,
            trace: false,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessSettings {
    #[serde(flatten)]
    pub net: NetSettings,
    pub policy: Policy,
    pub episodes_per_position: usize,
    /// Sweep both the ANN and its spiking twin over the same seeds.
    pub compare: bool,
    pub input_mode: InputMode,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        RobustnessSettings {
            net: NetSettings::default(),
            policy: default_eval_policy(),
            episodes_per_position: 20,
            compare: false,
            input_mode: InputMode::Grayscale,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMethod {
    Normalize,
    Unit,
}

impl FromStr for ScaleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalize" => Ok(ScaleMethod::Normalize),
            "unit" => Ok(ScaleMethod::Unit),
            _ => Err(Error::Usage(format!("unknown scale method '{s}' (normalize|unit)"))),
        }
    }
}

/// How normalization samples its activation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationSettings {
    pub percentile: f64,
    /// On-policy states collected from the ANN.
    pub samples: usize,
    pub sample_policy: Policy,
    pub input_reference: InputReference,
}

impl Default for NormalizationSettings {
    fn default() -> Self {
        NormalizationSettings {
            percentile: 99.9,
            samples: 1000,
            sample_policy: default_eval_policy(),
            input_reference: InputReference::Fixed(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvertSettings {
    pub weights: PathBuf,
    pub method: ScaleMethod,
    pub normalization: NormalizationSettings,
    pub neuron: NeuronConfig,
    pub nt: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for ConvertSettings {
    fn default() -> Self {
        ConvertSettings {
            weights: PathBuf::new(),
            method: ScaleMethod::Normalize,
            normalization: NormalizationSettings::default(),
            neuron: NeuronConfig::default(),
            nt: DEFAULT_NT,
            input_mode: InputMode::Grayscale,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    Pso,
    Grid,
}

impl FromStr for SearchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pso" => Ok(SearchMethod::Pso),
            "grid" => Ok(SearchMethod::Grid),
            _ => Err(Error::Usage(format!("unknown search method '{s}' (pso|grid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeSettings {
    pub weights: PathBuf,
    pub method: SearchMethod,
    /// Inferred from the network's layer count when absent.
    pub dims: Option<usize>,
    pub swarm_size: Option<usize>,
    pub iterations: usize,
    pub low: f64,
    pub high: f64,
    pub grid_steps: usize,
    pub grid_cap: usize,
    pub fitness_episodes: usize,
    pub policy: Policy,
    pub neuron: NeuronConfig,
    pub nt: usize,
    /// Put the normalization scales into the initial swarm.
    pub seed_with_normalization: bool,
    pub normalization: NormalizationSettings,
    pub input_mode: InputMode,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        let swarm = SwarmConfig::default();
        OptimizeSettings {
            weights: PathBuf::new(),
            method: SearchMethod::Pso,
            dims: None,
            swarm_size: None,
            iterations: swarm.iterations,
            low: swarm.low,
            high: swarm.high,
            grid_steps: 5,
            grid_cap: 10_000,
            fitness_episodes: swarm.fitness_episodes,
            policy: Policy::Greedy,
            neuron: NeuronConfig::default(),
            nt: DEFAULT_NT,
            seed_with_normalization: true,
            normalization: NormalizationSettings::default(),
            input_mode: InputMode::Grayscale,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePolicy {
    Random,
    Noop,
}

impl FromStr for BaselinePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselinePolicy::Random),
            "noop" => Ok(BaselinePolicy::Noop),
            _ => Err(Error::Usage(format!("unknown baseline '{s}' (random|noop)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub policy: BaselinePolicy,
    pub episodes: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            policy: BaselinePolicy::Random,
            episodes: 100,
            input_mode: InputMode::Grayscale,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

/// A subcommand with its resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Train(TrainerConfig),
    Convert(ConvertSettings),
    Optimize(OptimizeSettings),
    Evaluate(EvalSettings),
    Robustness(RobustnessSettings),
    Baseline(BaselineSettings),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Convert(_) => "convert",
            Command::Optimize(_) => "optimize",
            Command::Evaluate(_) => "evaluate",
            Command::Robustness(_) => "robustness",
            Command::Baseline(_) => "baseline",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Command::Train(s) => s.seed,
            Command::Convert(s) => s.seed,
            Command::Optimize(s) => s.seed,
            Command::Evaluate(s) => s.seed,
            Command::Robustness(s) => s.seed,
            Command::Baseline(s) => s.seed,
        }
    }

    pub fn settings_json(&self) -> serde_json::Value {
        let v = match self {
            Command::Train(s) => serde_json::to_value(s),
            Command::Convert(s) => serde_json::to_value(s),
            Command::Optimize(s) => serde_json::to_value(s),
            Command::Evaluate(s) => serde_json::to_value(s),
            Command::Robustness(s) => serde_json::to_value(s),
            Command::Baseline(s) => serde_json::to_value(s),
        };
        v.expect("settings serialize")
    }

    pub fn from_parts(name: &str, settings: serde_json::Value) -> Result<Self> {
        Ok(match name {
            "train" => Command::Train(serde_json::from_value(settings)?),
            "convert" => Command::Convert(serde_json::from_value(settings)?),
            "optimize" => Command::Optimize(serde_json::from_value(settings)?),
            "evaluate" => Command::Evaluate(serde_json::from_value(settings)?),
            "robustness" => Command::Robustness(serde_json::from_value(settings)?),
            "baseline" => Command::Baseline(serde_json::from_value(settings)?),
            other => return Err(Error::Usage(format!("unknown command '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub settings: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn command(&self) -> Result<Command> {
        Command::from_parts(&self.command, self.settings.clone())
    }
}

/// Load a TOML settings file into `T`, leaving unspecified fields at their
/// defaults.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {}", path.display(), e.message())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reward histogram with unit-width bins `[k, k + 1)` from 0 to the maximum.
pub fn write_histogram_csv<W: Write>(rewards: &[f32], mut out: W) -> Result<()> {
    let csv = |e: std::io::Error| Error::Csv(e.to_string());
    let top = rewards.iter().fold(0.0f32, |m, &r| m.max(r)).floor() as usize;
    let mut counts = vec![0usize; top + 1];
    for &r in rewards {
        counts[(r.max(0.0).floor() as usize).min(top)] += 1;
    }
    writeln!(out, "bin_low,bin_high,count").map_err(csv)?;
    for (k, c) in counts.iter().enumerate() {
        writeln!(out, "{},{},{}", k, k + 1, c).map_err(csv)?;
    }
    out.flush().map_err(csv)
}

/// What a finished command reports back to the caller.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// One line for stdout.
    pub summary: String,
    pub manifest: Manifest,
}

/// Run `command`, writing its artifacts and `manifest.json` under `out`.
pub fn execute(command: &Command, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    let summary = match command {
        Command::Train(s) => cmd_train(s, out)?,
        Command::Convert(s) => cmd_convert(s, out)?,
        Command::Optimize(s) => cmd_optimize(s, out)?,
        Command::Evaluate(s) => cmd_evaluate(s, out)?,
        Command::Robustness(s) => cmd_robustness(s, out)?,
        Command::Baseline(s) => cmd_baseline(s, out)?,
    };
    let manifest = Manifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: command.seed(),
        settings: command.settings_json(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(Outcome { summary, manifest })
}

/// Repeat the run recorded in a manifest.
pub fn rerun(manifest: &Path, out: &Path) -> Result<Outcome> {
    execute(&Manifest::read(manifest)?.command()?, out)
}

pub fn cmd_train(config: &TrainerConfig, out: &Path) -> Result<String> {
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let (net, log) = train_with(config, &mut |_, _| Ok(()))?;
    save_weights(&net, &out.join("weights.json"))?;
    log.write_csv(create(&out.join("training.csv"))?)?;
    let tail = log.tail_mean(100);
    write_json(
        &out.join("report.json"),
        &json!({
            "episodes": log.episodes.len(),
            "tail_mean_100": tail,
        }),
    )?;
    Ok(format!("trained {} episodes, last-100 mean {:.2}", log.episodes.len(), tail))
}

fn normalization(
    net: &NetworkDescription,
    settings: &NormalizationSettings,
    spec_base: &EpisodeSpec,
    seed: u64,
) -> Result<crate::optimize::Normalization> {
    let spec = EpisodeSpec {
        policy: settings.sample_policy,
        ..spec_base.clone()
    };
    let states: Vec<_> = collect_states(&Agent::ann(net)?, &spec, seed, settings.samples)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    normalize_scales_with(net, &states, settings.percentile, settings.input_reference)
}

pub fn cmd_convert(s: &ConvertSettings, out: &Path) -> Result<String> {
    require(&s.weights, "--weights")?;
    check_policy(s.normalization.sample_policy)?;
    let net = load_weights(&s.weights)?;
    let spec = EpisodeSpec {
        env: s.env.clone(),
        ..EpisodeSpec::new(s.input_mode, Policy::Greedy)
    };
    let (scales, lambdas, warnings) = match s.method {
        ScaleMethod::Unit => (ScaleVector::ones(net.n_layers()), Vec::new(), Vec::new()),
        ScaleMethod::Normalize => {
            let n = normalization(&net, &s.normalization, &spec, s.seed)?;
            (n.scales, n.lambdas, n.warnings)
        }
    };
    // fail here rather than at evaluation time
    convert(&net, &scales, s.neuron, s.nt)?;
    let file = ScalesFile {
        scales: scales.clone(),
        fitness: None,
        history: Vec::new(),
        config: serde_json::to_value(s)?,
        seed: s.seed,
    };
    write_json(&out.join("scales.json"), &file)?;
    write_json(
        &out.join("report.json"),
        &json!({ "scales": scales, "lambdas": lambdas, "warnings": warnings }),
    )?;
    Ok(format!("scales {:?}", scales.as_slice()))
}

pub fn cmd_optimize(s: &OptimizeSettings, out: &Path) -> Result<String> {
    require(&s.weights, "--weights")?;
    check_policy(s.policy)?;
    let net = load_weights(&s.weights)?;
    let layers = net.n_layers();
    let dims = s.dims.unwrap_or(layers);
    if dims != layers {
        return Err(Error::Usage(format!("--dims {dims} but the network has {layers} layers")));
    }
    let spec = EpisodeSpec {
        env: s.env.clone(),
        ..EpisodeSpec::new(s.input_mode, s.policy)
    };
    let net_ref = Arc::new(net);
    let eval = |x: &[f64]| {
        let scales = ScaleVector::new(x.iter().map(|&v| v as f32).collect())?;
        fitness(&net_ref, &scales, s.neuron, s.nt, &spec, s.seed, s.fitness_episodes)
    };

    let norm = normalization(&net_ref, &s.normalization, &spec, s.seed)?;
    let norm_point: Vec<f64> = norm.scales.as_slice().iter().map(|&v| v as f64).collect();
    let baseline = eval(&norm_point)?;

    let (best, best_fitness, history, config) = match s.method {
        SearchMethod::Pso => {
            let mut cfg = SwarmConfig::new(dims);
            if let Some(n) = s.swarm_size {
                cfg.swarm_size = n;
            }
            cfg.iterations = s.iterations;
            cfg.low = s.low;
            cfg.high = s.high;
            cfg.fitness_episodes = s.fitness_episodes;
            cfg.seed = s.seed;
            cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let seeds = if s.seed_with_normalization {
                let clamped = norm_point.iter().map(|v| v.clamp(s.low, s.high)).collect();
                vec![clamped]
            } else {
                Vec::new()
            };
            let r = pso_optimize(&cfg, &seeds, eval)?;
            (r.best, r.best_fitness, r.history, serde_json::to_value(&cfg)?)
        }
        SearchMethod::Grid => {
            let axis = grid_axis(s.low, s.high, s.grid_steps, Axis::Log);
            let r = grid_search(&vec![axis; dims], s.grid_cap, true, eval)?;
            (r.best, r.best_fitness, Vec::new(), serde_json::to_value(s)?)
        }
    };
    // the normalization point competes on equal terms
    let (best, best_fitness) = if baseline > best_fitness {
        (norm_point.clone(), baseline)
    } else {
        (best, best_fitness)
    };
    let scales = ScaleVector::new(best.iter().map(|&v| v as f32).collect())?;
    let file = ScalesFile {
        scales: scales.clone(),
        fitness: Some(best_fitness),
        history,
        config,
        seed: s.seed,
    };
    write_json(&out.join("scales.json"), &file)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "method": s.method,
            "dims": dims,
            "best": best,
            "best_fitness": best_fitness,
            "normalization_scales": norm_point,
            "normalization_fitness": baseline,
        }),
    )?;
    Ok(format!(
        "best fitness {best_fitness:.2} at {:?} (normalization {baseline:.2})",
        scales.as_slice()
    ))
}

#[derive(Serialize)]
struct TraceLine {
    episode: usize,
    step: usize,
    action: usize,
    reward: f32,
    lives: u32,
}

pub fn cmd_evaluate(s: &EvalSettings, out: &Path) -> Result<String> {
    s.net.validate()?;
    check_policy(s.policy)?;
    let agent = s.net.agent(s.net.network)?;
    let spec = EpisodeSpec {
        env: s.env.clone(),
        ..EpisodeSpec::new(s.input_mode, s.policy)
    };
    let (report, episodes) = evaluate(&agent, &spec, s.seed, s.episodes)?;
    write_json(&out.join("report.json"), &report)?;
    EvalReport::write_episodes_csv(&episodes, create(&out.join("episodes.csv"))?)?;
    write_histogram_csv(&report.rewards, create(&out.join("histogram.csv"))?)?;
    if s.trace {
        let mut w = create(&out.join("trace.jsonl"))?;
        for i in 0..s.episodes {
            let mut lines = Vec::new();
            run_episode_observed(&mut agent.clone(), &spec, episode_seed(s.seed, i), |_, r| {
                lines.push(TraceLine {
                    episode: i,
                    step: r.step,
                    action: r.action,
                    reward: r.reward,
                    lives: r.lives,
                })
            })?;
            for l in lines {
                serde_json::to_writer(&mut w, &l)?;
                writeln!(w).map_err(|e| Error::io(out.join("trace.jsonl"), e))?;
            }
        }
        w.flush().map_err(|e| Error::io(out.join("trace.jsonl"), e))?;
    }
    Ok(format!("{} {} {}: {}", report.network, report.policy.name(), report.input_mode, report.summary()))
}

fn sweep_average(rows: &[SweepRow]) -> f64 {
    rows.iter().map(|r| r.mean).sum::<f64>() / rows.len().max(1) as f64
}

pub fn cmd_robustness(s: &RobustnessSettings, out: &Path) -> Result<String> {
    s.net.validate()?;
    check_policy(s.policy)?;
    if s.compare && s.net.scales.is_none() {
        return Err(Error::Usage("--compare needs --scales for the spiking network".into()));
    }
    let spec = EpisodeSpec {
        env: s.env.clone(),
        ..EpisodeSpec::new(s.input_mode, s.policy)
    };
    let primary = s.net.network;
    let rows = occlusion_sweep(&s.net.agent(primary)?, &spec, s.seed, s.episodes_per_position)?;
    debug_assert_eq!(rows.len(), OCCLUSION_POSITIONS);
    write_sweep_csv(&rows, create(&out.join("sweep.csv"))?)?;
    let mut report = json!({
        "network": primary,
        "positions": rows.len(),
        "episodes_per_position": s.episodes_per_position,
        "average": sweep_average(&rows),
    });
    if !s.compare {
        write_json(&out.join("report.json"), &report)?;
        return Ok(format!(
            "{primary}: {} positions, average {:.2}",
            rows.len(),
            sweep_average(&rows)
        ));
    }
    let other = if primary == NetKind::Snn { NetKind::Ann } else { NetKind::Snn };
    let other_rows = occlusion_sweep(&s.net.agent(other)?, &spec, s.seed, s.episodes_per_position)?;
    let (ann, snn) = if primary == NetKind::Snn {
        (&other_rows, &rows)
    } else {
        (&rows, &other_rows)
    };
    write_sweep_csv(ann, create(&out.join("sweep_ann.csv"))?)?;
    write_sweep_csv(snn, create(&out.join("sweep_snn.csv"))?)?;
    write_comparison_csv(ann, snn, create(&out.join("comparison.csv"))?)?;
    let (a, b) = (sweep_average(ann), sweep_average(snn));
    report = json!({
        "positions": rows.len(),
        "episodes_per_position": s.episodes_per_position,
        "ann_average": a,
        "snn_average": b,
        "snn_at_least_ann": b >= a,
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(format!(
        "{} positions; average ann {a:.2}, snn {b:.2}{}",
        rows.len(),
        if b >= a { "" } else { " (snn below ann)" }
    ))
}

pub fn cmd_baseline(s: &BaselineSettings, out: &Path) -> Result<String> {
    let policy = match s.policy {
        BaselinePolicy::Random => Policy::EpsilonGreedy { epsilon: 1.0 },
        BaselinePolicy::Noop => Policy::Greedy,
    };
    let spec = EpisodeSpec {
        env: s.env.clone(),
        ..EpisodeSpec::new(s.input_mode, policy)
    };
    let (report, episodes) = evaluate(&Agent::Zero { n_actions: 4 }, &spec, s.seed, s.episodes)?;
    write_json(&out.join("report.json"), &report)?;
    EvalReport::write_episodes_csv(&episodes, create(&out.join("episodes.csv"))?)?;
    write_histogram_csv(&report.rewards, create(&out.join("histogram.csv"))?)?;
    Ok(format!("{:?} baseline: {}", s.policy, report.summary()).to_lowercase())
}

/// Mean of an [`EvalReport`] read back from `report.json`.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parsing() {
        assert_eq!(parse_policy("greedy", None).unwrap(), Policy::Greedy);
        assert_eq!(
            parse_policy("epsilon-greedy", None).unwrap(),
            Policy::EpsilonGreedy { epsilon: 0.05 }
        );
        assert_eq!(parse_policy("0.2", None).unwrap(), Policy::EpsilonGreedy { epsilon: 0.2 });
        assert_eq!(parse_policy("bogus", None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn histogram_bins() {
        let mut buf = Vec::new();
        write_histogram_csv(&[0.0, 0.0, 1.0, 2.5], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "bin_low,bin_high,count\n0,1,2\n1,2,1\n2,3,1\n"
        );
    }

    #[test]
    fn snn_without_scales_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().join("w.json");
        save_weights(&NetworkDescription::shallow(4, 4, 0), &w).unwrap();
        let s = EvalSettings {
            net: NetSettings {
                weights: w,
                network: NetKind::Snn,
                ..NetSettings::default()
            },
            ..EvalSettings::default()
        };
        let e = execute(&Command::Evaluate(s), dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn settings_round_trip_through_manifest_form() {
        let c = Command::Evaluate(EvalSettings {
            episodes: 3,
            ..EvalSettings::default()
        });
        let back = Command::from_parts(c.name(), c.settings_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn toml_overrides_only_given_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "episodes = 7\nnetwork = \"snn\"\n[neuron]\nkind = \"lif\"\n").unwrap();
        let s: EvalSettings = load_config(&p).unwrap();
        assert_eq!(s.episodes, 7);
        assert_eq!(s.net.network, NetKind::Snn);
        assert_eq!(s.net.neuron.kind, crate::neuron::NeuronKind::Lif);
        assert_eq!(s.policy, default_eval_policy());
    }
}
