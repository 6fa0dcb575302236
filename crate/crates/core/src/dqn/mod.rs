//! Deep Q-learning for the shallow network: replay memory, a periodically
//! synchronised target network and an epsilon-greedy behaviour policy.

mod qnet;
mod replay;

pub use qnet::{AdamState, DenseParams, DenseQNet, Gradient, Trace};
pub use replay::{ReplayBuffer, SparseObs, Transition};

use std::collections::VecDeque;
use std::io::Write;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{NetworkDescription, N_ACTIONS, SHALLOW_HIDDEN};
use crate::env::{Action, Breakout, EnvConfig, FrameHistory, InputMode};
use crate::error::{Error, Result};
use crate::tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Optimizer plus whatever state it carries between steps.
#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd,
    Adam(Box<AdamState>),
}

impl OptimizerState {
    pub fn new(kind: Optimizer, net: &DenseQNet) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => OptimizerState::Adam(Box::new(AdamState::new(net))),
        }
    }

    pub fn apply(&mut self, net: &mut DenseQNet, grad: &Gradient, lr: f32) {
        match self {
            OptimizerState::Sgd => net.apply(grad, lr),
            OptimizerState::Adam(state) => net.apply_adam(grad, state, lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub gamma: f32,
    pub optimizer: Optimizer,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Environment steps between target-network syncs.
    pub target_sync_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps (after warm-up) over which epsilon decays linearly.
    pub epsilon_decay_steps: usize,
    pub episodes: usize,
    pub replay_capacity: usize,
    pub replay_warmup: usize,
    /// Environment steps per gradient step.
    pub train_every: usize,
    /// Steps folded into each stored transition (1 is plain Q-learning).
    pub n_step: usize,
    /// Treat a lost life as terminal in the TD target.
    pub life_loss_terminal: bool,
    pub clip_rewards: bool,
    pub hidden: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.002,
            batch_size: 32,
            target_sync_interval: 2_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 150_000,
            episodes: 2_000,
            replay_capacity: 20_000,
            replay_warmup: 2_000,
            train_every: 4,
            n_step: 1,
            life_loss_terminal: true,
            clip_rewards: true,
            hidden: SHALLOW_HIDDEN,
            input_mode: InputMode::Grayscale,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Replay 200,000 / warm-up 50,000 / 30,000 episodes.
    pub fn paper_scale() -> Self {
        TrainerConfig {
            replay_capacity: 200_000,
            replay_warmup: 50_000,
            episodes: 30_000,
            epsilon_decay_steps: 1_000_000,
            target_sync_interval: 10_000,
            ..TrainerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("trainer config", m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.replay_warmup > self.replay_capacity {
            return bad(format!(
                "warm-up {} exceeds capacity {}",
                self.replay_warmup, self.replay_capacity
            ));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.train_every == 0 || self.n_step == 0 {
            return bad("batch size, capacity, train_every and n_step must be positive".into());
        }
        if self.target_sync_interval == 0 {
            return bad("target_sync_interval must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("epsilon {e} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Exploration rate after `step` post-warm-up steps.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// `r` if the transition ended the episode, else `r + gamma * max_a' q_next[a']`.
pub fn bellman_target(r: f32, max_next_q: f32, done: bool, gamma: f32) -> f32 {
    if done {
        r
    } else {
        r + gamma * max_next_q
    }
}

pub fn td_target(r: f32, s_next: &SparseObs, done: bool, target_net: &DenseQNet, gamma: f32) -> f32 {
    if done {
        r
    } else {
        bellman_target(r, target_net.max_q(s_next), false, gamma)
    }
}

/// One optimizer step on the mean squared TD error of `batch`. Returns the loss
/// measured before the update.
pub fn train_step(
    net: &mut DenseQNet,
    target_net: &DenseQNet,
    batch: &[&Transition],
    config: &TrainerConfig,
    optimizer: &mut OptimizerState,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    let live: Vec<&SparseObs> = batch.iter().filter(|t| !t.done).map(|t| &t.s_next).collect();
    let mut next_q = target_net.forward_batch(&live).into_iter().map(|tr| {
        tr.q().iter().copied().fold(f32::NEG_INFINITY, f32::max)
    });
    let targets: Vec<f32> = batch
        .iter()
        .map(|t| {
            let gamma = config.gamma.powi(t.horizon as i32);
            if t.done {
                t.r
            } else {
                bellman_target(t.r, next_q.next().expect("one per live sample"), false, gamma)
            }
        })
        .collect();
    let samples: Vec<(&SparseObs, usize, f32)> = batch
        .iter()
        .zip(&targets)
        .map(|(t, &y)| (&t.s, t.a, y))
        .collect();
    let (grad, loss) = net.backward(&samples);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "batch loss {loss}; targets {:?}",
            &targets[..targets.len().min(8)]
        )));
    }
    optimizer.apply(net, &grad, config.learning_rate);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f32,
    pub epsilon: f64,
    pub mean_td_error: f32,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let csv = |e: std::io::Error| Error::Csv(e.to_string());
        writeln!(out, "episode,reward,epsilon,mean_td_error,steps").map_err(csv)?;
        for e in &self.episodes {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                e.episode, e.reward, e.epsilon, e.mean_td_error, e.steps
            )
            .map_err(csv)?;
        }
        out.flush().map_err(csv)
    }

    /// Mean reward of the last `n` episodes.
    pub fn tail_mean(&self, n: usize) -> f32 {
        let tail = &self.episodes[self.episodes.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|e| e.reward).sum::<f32>() / tail.len() as f32
    }
}

/// Folds consecutive steps into `n`-step transitions.
struct NStepQueue {
    n: usize,
    gamma: f32,
    pending: VecDeque<(SparseObs, usize, f32)>,
}

impl NStepQueue {
    fn new(n: usize, gamma: f32) -> Self {
        NStepQueue {
            n,
            gamma,
            pending: VecDeque::with_capacity(n),
        }
    }

    fn clear(&mut self) {
        self.pending.clear();
    }

    fn push(
        &mut self,
        step: (SparseObs, usize, f32),
        s_next: &SparseObs,
        done: bool,
        buffer: &mut ReplayBuffer,
    ) -> Result<()> {
        self.pending.push_back(step);
        if done {
            while !self.pending.is_empty() {
                self.emit(s_next, true, buffer)?;
            }
        } else if self.pending.len() == self.n {
            self.emit(s_next, false, buffer)?;
        }
        Ok(())
    }

    fn emit(&mut self, s_next: &SparseObs, done: bool, buffer: &mut ReplayBuffer) -> Result<()> {
        let mut ret = 0.0;
        for (_, _, r) in self.pending.iter().rev() {
            ret = r + self.gamma * ret;
        }
        let horizon = self.pending.len() as u32;
        let (s, a, _) = self.pending.pop_front().expect("non-empty");
        buffer.push(Transition::new(s, a, ret, s_next.clone(), done, N_ACTIONS)?.with_horizon(horizon));
        Ok(())
    }
}

/// Called after every finished training episode with the online network.
pub type Checkpoint<'a> = dyn FnMut(&EpisodeLog, &DenseQNet) -> Result<()> + 'a;

/// Full DQN loop. Returns the trained network and one log entry per episode.
pub fn train(config: &TrainerConfig) -> Result<(NetworkDescription, TrainingLog)> {
    train_with(config, &mut |_, _| Ok(()))
}

pub fn train_with(
    config: &TrainerConfig,
    checkpoint: &mut Checkpoint<'_>,
) -> Result<(NetworkDescription, TrainingLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = NetworkDescription::shallow(config.hidden, N_ACTIONS, rng.gen());
    let mut online = DenseQNet::from_description(&init)?;
    let mut target = online.clone();
    let mut optimizer = OptimizerState::new(config.optimizer, &online);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut history = FrameHistory::new(config.input_mode);
    let clip = |r: f32| if config.clip_rewards { r.clamp(-1.0, 1.0) } else { r };
    let mut queue = NStepQueue::new(config.n_step, config.gamma);

    // warm-up with uniform random play
    while buffer.len() < config.replay_warmup {
        let mut env = Breakout::new(config.env.clone(), rng.gen());
        history.clear();
        queue.clear();
        history.push(&env.frame())?;
        let mut s = SparseObs::from_dense(history.observe()?.state.data());
        while !env.is_done() && buffer.len() < config.replay_warmup {
            let a = rng.gen_range(0..N_ACTIONS);
            let out = env.step(Action::from_index(a)?)?;
            history.push(&env.frame())?;
            let s_next = SparseObs::from_dense(history.observe()?.state.data());
            let done = out.done || (config.life_loss_terminal && out.life_lost);
            queue.push((s, a, clip(out.reward)), &s_next, done, &mut buffer)?;
            s = s_next;
        }
    }

    let mut log = TrainingLog::default();
    let mut step = 0usize;
    for episode in 0..config.episodes {
        let mut env = Breakout::new(config.env.clone(), rng.gen());
        history.clear();
        queue.clear();
        history.push(&env.frame())?;
        let mut s = SparseObs::from_dense(history.observe()?.state.data());
        let mut total = 0.0f32;
        let mut loss_sum = 0.0f32;
        let mut loss_n = 0usize;
        let mut eps = config.epsilon_at(step);
        while !env.is_done() {
            eps = config.epsilon_at(step);
            let a = if rng.gen::<f64>() < eps {
                rng.gen_range(0..N_ACTIONS)
            } else {
                tensor::argmax(&online.q_values(&s))
            };
            let out = env.step(Action::from_index(a)?)?;
            total += out.reward;
            history.push(&env.frame())?;
            let s_next = SparseObs::from_dense(history.observe()?.state.data());
            let done = out.done || (config.life_loss_terminal && out.life_lost);
            queue.push((s, a, clip(out.reward)), &s_next, done, &mut buffer)?;
            s = s_next;
            step += 1;
            if step % config.train_every == 0 && !buffer.is_empty() {
                let batch = buffer.sample(config.batch_size, &mut rng);
                loss_sum += train_step(&mut online, &target, &batch, config, &mut optimizer)?;
                loss_n += 1;
            }
            if step % config.target_sync_interval == 0 {
                target = online.clone();
            }
        }
        let entry = EpisodeLog {
            episode,
            reward: total,
            epsilon: eps,
            mean_td_error: if loss_n > 0 { loss_sum / loss_n as f32 } else { 0.0 },
            steps: env.state().steps,
        };
        if (episode + 1) % 100 == 0 {
            info!(
                "episode {} step {} eps {:.3} mean reward (last 100) {:.2} loss {:.4}",
                episode + 1,
                step,
                eps,
                (log.tail_mean(99) * 99.0 + total) / 100.0,
                entry.mean_td_error
            );
        }
        checkpoint(&entry, &online)?;
        log.episodes.push(entry);
    }
    Ok((online.to_description(), log))
}
