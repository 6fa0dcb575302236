//! Episode harness: runs agents on the environment with per-episode seeds,
//! aggregates rewards and sweeps the occlusion bar.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{CompiledNet, NetworkDescription};
use crate::env::{
    occlude_in_place, Action, Breakout, EnvConfig, FrameHistory, InputMode, OCCLUSION_HEIGHT,
    OCCLUSION_POSITIONS,
};
use crate::error::{Error, Result};
use crate::snn::{select_action, Policy, SpikingNetwork};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    Ann,
    Snn,
    /// Placeholder network with all-zero outputs (noop under greedy,
    /// uniform random under epsilon = 1).
    Zero,
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetKind::Ann => "ann",
            NetKind::Snn => "snn",
            NetKind::Zero => "zero",
        })
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann" => Ok(NetKind::Ann),
            "snn" => Ok(NetKind::Snn),
            "zero" => Ok(NetKind::Zero),
            _ => Err(Error::Usage(format!("unknown network kind '{s}' (ann|snn)"))),
        }
    }
}

/// Something that maps observations to action values.
#[derive(Clone, Debug)]
pub enum Agent {
    Ann(Arc<CompiledNet>),
    Snn(Box<SpikingNetwork>),
    Zero { n_actions: usize },
}

impl Agent {
    pub fn ann(net: &NetworkDescription) -> Result<Self> {
        Ok(Agent::Ann(Arc::new(CompiledNet::new(net)?)))
    }

    pub fn kind(&self) -> NetKind {
        match self {
            Agent::Ann(_) => NetKind::Ann,
            Agent::Snn(_) => NetKind::Snn,
            Agent::Zero { .. } => NetKind::Zero,
        }
    }

    fn begin_episode(&mut self, seed: u64) {
        if let Agent::Snn(s) = self {
            s.reseed(seed);
        }
    }

    pub fn q_values(&mut self, obs: &Tensor) -> Result<Vec<f32>> {
        match self {
            Agent::Ann(net) => net.forward(obs.data()),
            Agent::Snn(s) => Ok(s.forward(obs)?.q_estimates.into_data()),
            Agent::Zero { n_actions } => Ok(vec![0.0; *n_actions]),
        }
    }
}

/// Everything about an episode except the agent and its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub env: EnvConfig,
    pub input_mode: InputMode,
    pub policy: Policy,
    /// Top row of the occlusion bar, if any.
    pub occlusion: Option<usize>,
}

impl EpisodeSpec {
    pub fn new(input_mode: InputMode, policy: Policy) -> Self {
        EpisodeSpec {
            env: EnvConfig::default(),
            input_mode,
            policy,
            occlusion: None,
        }
    }

    pub fn occluded(&self, bar_row: usize) -> Self {
        EpisodeSpec {
            occlusion: Some(bar_row),
            ..self.clone()
        }
    }
}

/// Seed of episode `index` under a master seed.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    pub reward: f32,
    pub steps: usize,
}

/// Play one episode. The environment, exploration and escape-noise streams
/// are all derived from `seed`.
pub fn run_episode(agent: &mut Agent, spec: &EpisodeSpec, seed: u64) -> Result<(f32, usize)> {
    run_episode_observed(agent, spec, seed, |_, _| {})
}

/// What happened on one environment step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: usize,
    pub reward: f32,
    pub lives: u32,
}

/// As [`run_episode`], calling `observe(state, record)` after every step with
/// the observation the action was chosen from.
pub fn run_episode_observed(
    agent: &mut Agent,
    spec: &EpisodeSpec,
    seed: u64,
    mut observe: impl FnMut(&Tensor, StepRecord),
) -> Result<(f32, usize)> {
    let mut env = Breakout::new(spec.env.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_AC71_0115);
    agent.begin_episode(seed.rotate_left(17));
    let mut history = FrameHistory::new(spec.input_mode);
    history.push(&env.frame())?;
    let mut total = 0.0;
    while !env.is_done() {
        let mut obs = history.observe()?.state;
        if let Some(bar) = spec.occlusion {
            occlude_in_place(obs.data_mut(), bar)?;
        }
        let q = agent.q_values(&obs)?;
        let a = select_action(&q, spec.policy, &mut rng)?;
        let out = env.step(Action::from_index(a)?)?;
        total += out.reward;
        observe(
            &obs,
            StepRecord {
                step: env.state().steps,
                action: a,
                reward: out.reward,
                lives: env.state().lives,
            },
        );
        history.push(&env.frame())?;
    }
    Ok((total, env.state().steps))
}

/// Episodes `0..n` under `master`, fanned out across workers. Results are in
/// episode order regardless of scheduling.
pub fn run_episodes(agent: &Agent, spec: &EpisodeSpec, master: u64, n: usize) -> Result<Vec<EpisodeResult>> {
    (0..n)
        .into_par_iter()
        .map_init(
            || agent.clone(),
            |a, i| {
                let seed = episode_seed(master, i);
                let (reward, steps) = run_episode(a, spec, seed)?;
                Ok(EpisodeResult {
                    episode: i,
                    seed,
                    reward,
                    steps,
                })
            },
        )
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f32]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rewards: Vec<f32>,
    pub mean: f64,
    pub std: f64,
    pub policy: Policy,
    pub network: NetKind,
    pub input_mode: InputMode,
}

impl EvalReport {
    pub fn new(rewards: Vec<f32>, policy: Policy, network: NetKind, input_mode: InputMode) -> Self {
        let (mean, std) = mean_std(&rewards);
        EvalReport {
            rewards,
            mean,
            std,
            policy,
            network,
            input_mode,
        }
    }

    pub fn from_episodes(eps: &[EpisodeResult], policy: Policy, network: NetKind, input_mode: InputMode) -> Self {
        EvalReport::new(eps.iter().map(|e| e.reward).collect(), policy, network, input_mode)
    }

    /// `mean ± std` with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }

    pub fn write_episodes_csv<W: Write>(eps: &[EpisodeResult], mut out: W) -> Result<()> {
        let csv = |e: std::io::Error| Error::Csv(e.to_string());
        writeln!(out, "episode,seed,reward,steps").map_err(csv)?;
        for e in eps {
            writeln!(out, "{},{},{},{}", e.episode, e.seed, e.reward, e.steps).map_err(csv)?;
        }
        out.flush().map_err(csv)
    }

    /// Parse the CSV written by [`EvalReport::write_episodes_csv`].
    pub fn read_episodes_csv(text: &str) -> Result<Vec<EpisodeResult>> {
        let mut lines = text.lines();
        match lines.next() {
            Some("episode,seed,reward,steps") => {}
            other => return Err(Error::Csv(format!("unexpected header {other:?}"))),
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Csv(format!("line {}: '{line}'", i + 2));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(EpisodeResult {
                    episode: f[0].parse().map_err(|_| bad())?,
                    seed: f[1].parse().map_err(|_| bad())?,
                    reward: f[2].parse().map_err(|_| bad())?,
                    steps: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }
}

pub fn evaluate(agent: &Agent, spec: &EpisodeSpec, master: u64, episodes: usize) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let eps = run_episodes(agent, spec, master, episodes)?;
    let report = EvalReport::from_episodes(&eps, spec.policy, agent.kind(), spec.input_mode);
    Ok((report, eps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bar_top: usize,
    /// Row of the lowest occluded pixel.
    pub bar_bottom: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean reward with the bar at each of the 77 positions, bottom first. Every
/// position reuses the same episode seeds.
pub fn occlusion_sweep(agent: &Agent, spec: &EpisodeSpec, master: u64, episodes: usize) -> Result<Vec<SweepRow>> {
    (0..OCCLUSION_POSITIONS)
        .rev()
        .map(|top| {
            let eps = run_episodes(agent, &spec.occluded(top), master, episodes)?;
            let rewards: Vec<f32> = eps.iter().map(|e| e.reward).collect();
            let (mean, std) = mean_std(&rewards);
            Ok(SweepRow {
                bar_top: top,
                bar_bottom: top + OCCLUSION_HEIGHT - 1,
                mean,
                std,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    let csv = |e: std::io::Error| Error::Csv(e.to_string());
    writeln!(out, "bar_top,bar_bottom,mean,std").map_err(csv)?;
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.bar_top, r.bar_bottom, r.mean, r.std).map_err(csv)?;
    }
    out.flush().map_err(csv)
}

/// ANN and SNN sweeps side by side, keyed by bar position.
pub fn write_comparison_csv<W: Write>(ann: &[SweepRow], snn: &[SweepRow], mut out: W) -> Result<()> {
    if ann.len() != snn.len() {
        return Err(Error::dim(format!("{} ann rows vs {} snn rows", ann.len(), snn.len())));
    }
    let csv = |e: std::io::Error| Error::Csv(e.to_string());
    writeln!(out, "bar_bottom,ann_mean,ann_std,snn_mean,snn_std").map_err(csv)?;
    for (a, s) in ann.iter().zip(snn) {
        if a.bar_top != s.bar_top {
            return Err(Error::invalid("sweep", "rows are not aligned"));
        }
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            a.bar_bottom, a.mean, a.std, s.mean, s.std
        )
        .map_err(csv)?;
    }
    out.flush().map_err(csv)
}

/// Observations visited by `agent` playing under `spec`, with its chosen
/// actions, until `n` states are collected.
pub fn collect_states(agent: &Agent, spec: &EpisodeSpec, master: u64, n: usize) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::with_capacity(n);
    let mut a = agent.clone();
    let mut i = 0;
    while out.len() < n {
        run_episode_observed(&mut a, spec, episode_seed(master, i), |obs, rec| {
            if out.len() < n {
                out.push((obs.clone(), rec.action));
            }
        })?;
        i += 1;
    }
    Ok(out)
}
