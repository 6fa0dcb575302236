use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use qspike::dqn::{Optimizer, TrainerConfig};
use qspike::env::InputMode;
use qspike::eval::NetKind;
use qspike::harness::{
    self, parse_policy, BaselinePolicy, BaselineSettings, Command, ConvertSettings, EvalSettings, NetSettings,
    NormalizationSettings, OptimizeSettings, RobustnessSettings, ScaleMethod, SearchMethod,
};
use qspike::neuron::{NeuronConfig, NeuronKind};
use qspike::optimize::InputReference;
use qspike::snn::Policy;
use qspike::{Error, Result};

#[derive(Parser)]
#[command(name = "qspike", version, about = "Spiking Q-networks on miniature Breakout")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a shallow Q-network with DQN.
    Train(TrainArgs),
    /// Compute layer scales for the spiking twin.
    Convert(ConvertArgs),
    /// Search layer scales by game fitness.
    Optimize(OptimizeArgs),
    /// Play episodes and report mean reward.
    Evaluate(EvalArgs),
    /// Occlusion-bar sweep over all 77 positions.
    Robustness(RobustnessArgs),
    /// Score the random or noop policy.
    Baseline(BaselineArgs),
    /// Repeat a run from its manifest.json.
    Rerun {
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// binary | grayscale
    #[arg(long)]
    input_mode: Option<InputMode>,
}

impl Common {
    fn load<T: Default + for<'de> serde::Deserialize<'de>>(&self) -> Result<T> {
        match &self.config {
            Some(p) => harness::load_config(p),
            None => Ok(T::default()),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Full-size replay memory, warm-up and episode count.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    #[arg(long)]
    replay_warmup: Option<usize>,
    #[arg(long)]
    target_sync_interval: Option<usize>,
    #[arg(long)]
    epsilon_decay_steps: Option<usize>,
    #[arg(long)]
    train_every: Option<usize>,
    /// Rewards folded into each replay transition
    #[arg(long)]
    n_step: Option<usize>,
}

#[derive(Args)]
struct NeuronArgs {
    /// if | sub-if | lif | stochastic-lif
    #[arg(long)]
    neuron: Option<NeuronKind>,
    #[arg(long)]
    tau: Option<f32>,
    /// Simulation steps per forward pass.
    #[arg(long)]
    nt: Option<usize>,
}

impl NeuronArgs {
    fn apply(&self, neuron: &mut NeuronConfig, nt: &mut usize) {
        if let Some(k) = self.neuron {
            *neuron = NeuronConfig::new(k);
        }
        if let Some(t) = self.tau {
            neuron.tau = t;
        }
        if let Some(n) = self.nt {
            *nt = n;
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// greedy | epsilon-greedy
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
}

impl PolicyArgs {
    fn apply(&self, policy: &mut Policy) -> Result<()> {
        match (&self.policy, self.epsilon) {
            (Some(p), e) => *policy = parse_policy(p, e)?,
            (None, Some(e)) => *policy = Policy::EpsilonGreedy { epsilon: e },
            (None, None) => {}
        }
        Ok(())
    }
}

#[derive(Args)]
struct NormArgs {
    #[arg(long)]
    percentile: Option<f64>,
    /// On-policy states used for the activation statistics.
    #[arg(long)]
    samples: Option<usize>,
    /// threshold | percentile: what the input layer is normalized against.
    #[arg(long)]
    input_reference: Option<String>,
}

impl NormArgs {
    fn apply(&self, n: &mut NormalizationSettings) -> Result<()> {
        if let Some(p) = self.percentile {
            n.percentile = p;
        }
        if let Some(s) = self.samples {
            n.samples = s;
        }
        if let Some(r) = &self.input_reference {
            n.input_reference = match r.as_str() {
                "threshold" => InputReference::Fixed(1.0),
                "percentile" => InputReference::Percentile,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown input reference '{other}' (threshold|percentile)"
                    )))
                }
            };
        }
        Ok(())
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// normalize | unit
    #[arg(long)]
    method: Option<ScaleMethod>,
    #[command(flatten)]
    norm: NormArgs,
    #[command(flatten)]
    neuron: NeuronArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// pso | grid
    #[arg(long)]
    method: Option<SearchMethod>,
    /// Number of scales; must equal the layer count.
    #[arg(long, conflicts_with = "dims_from")]
    dims: Option<usize>,
    /// `network`: take the dimension from the layer count.
    #[arg(long)]
    dims_from: Option<String>,
    #[arg(long)]
    swarm_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long)]
    fitness_episodes: Option<usize>,
    /// Start the swarm from random points only.
    #[arg(long)]
    no_normalization_seed: bool,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    neuron: NeuronArgs,
    #[command(flatten)]
    norm: NormArgs,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    /// ann | snn
    #[arg(long)]
    network: Option<NetKind>,
    #[arg(long)]
    scales: Option<PathBuf>,
    #[command(flatten)]
    neuron: NeuronArgs,
}

impl NetArgs {
    fn apply(&self, net: &mut NetSettings) {
        if let Some(w) = &self.weights {
            net.weights = w.clone();
        }
        if let Some(k) = self.network {
            net.network = k;
        }
        if let Some(s) = &self.scales {
            net.scales = Some(s.clone());
        }
        self.neuron.apply(&mut net.neuron, &mut net.nt);
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    episodes: Option<usize>,
    /// Write every step to trace.jsonl.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    episodes_per_position: Option<usize>,
    /// Sweep the ANN and the SNN side by side.
    #[arg(long)]
    compare: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    /// random | noop
    #[arg(long)]
    policy: Option<BaselinePolicy>,
    #[arg(long)]
    episodes: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(cmd: Cmd) -> Result<(Command, PathBuf)> {
    Ok(match cmd {
        Cmd::Train(a) => {
            let mut c: TrainerConfig = a.common.load()?;
            if a.paper_scale {
                let p = TrainerConfig::paper_scale();
                c.replay_capacity = p.replay_capacity;
                c.replay_warmup = p.replay_warmup;
                c.episodes = p.episodes;
                c.epsilon_decay_steps = p.epsilon_decay_steps;
                c.target_sync_interval = p.target_sync_interval;
            }
            set(&mut c.seed, a.common.seed);
            set(&mut c.input_mode, a.common.input_mode);
            set(&mut c.episodes, a.episodes);
            set(&mut c.learning_rate, a.learning_rate);
            set(&mut c.hidden, a.hidden);
            set(&mut c.gamma, a.gamma);
            set(&mut c.batch_size, a.batch_size);
            set(&mut c.replay_capacity, a.replay_capacity);
            set(&mut c.replay_warmup, a.replay_warmup);
            set(&mut c.target_sync_interval, a.target_sync_interval);
            set(&mut c.epsilon_decay_steps, a.epsilon_decay_steps);
            set(&mut c.train_every, a.train_every);
            set(&mut c.n_step, a.n_step);
            if let Some(o) = a.optimizer {
                c.optimizer = match o.as_str() {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    other => return Err(Error::Usage(format!("unknown optimizer '{other}' (sgd|adam)"))),
                };
            }
            (Command::Train(c), a.common.out)
        }
        Cmd::Convert(a) => {
            let mut s: ConvertSettings = a.common.load()?;
            set(&mut s.seed, a.common.seed);
            set(&mut s.input_mode, a.common.input_mode);
            set(&mut s.weights, a.weights);
            set(&mut s.method, a.method);
            a.norm.apply(&mut s.normalization)?;
            a.neuron.apply(&mut s.neuron, &mut s.nt);
            (Command::Convert(s), a.common.out)
        }
        Cmd::Optimize(a) => {
            let mut s: OptimizeSettings = a.common.load()?;
            set(&mut s.seed, a.common.seed);
            set(&mut s.input_mode, a.common.input_mode);
            set(&mut s.weights, a.weights);
            set(&mut s.method, a.method);
            match a.dims_from.as_deref() {
                Some("network") => s.dims = None,
                Some(other) => return Err(Error::Usage(format!("--dims-from {other}: only 'network'"))),
                None => {}
            }
            if a.dims.is_some() {
                s.dims = a.dims;
            }
            if a.swarm_size.is_some() {
                s.swarm_size = a.swarm_size;
            }
            set(&mut s.iterations, a.iterations);
            set(&mut s.low, a.low);
            set(&mut s.high, a.high);
            set(&mut s.grid_steps, a.grid_steps);
            set(&mut s.fitness_episodes, a.fitness_episodes);
            if a.no_normalization_seed {
                s.seed_with_normalization = false;
            }
            a.policy.apply(&mut s.policy)?;
            a.neuron.apply(&mut s.neuron, &mut s.nt);
            a.norm.apply(&mut s.normalization)?;
            (Command::Optimize(s), a.common.out)
        }
        Cmd::Evaluate(a) => {
            let mut s: EvalSettings = a.common.load()?;
            set(&mut s.seed, a.common.seed);
            set(&mut s.input_mode, a.common.input_mode);
            a.net.apply(&mut s.net);
            a.policy.apply(&mut s.policy)?;
            set(&mut s.episodes, a.episodes);
            s.trace |= a.trace;
            (Command::Evaluate(s), a.common.out)
        }
        Cmd::Robustness(a) => {
            let mut s: RobustnessSettings = a.common.load()?;
            set(&mut s.seed, a.common.seed);
            set(&mut s.input_mode, a.common.input_mode);
            a.net.apply(&mut s.net);
            a.policy.apply(&mut s.policy)?;
            set(&mut s.episodes_per_position, a.episodes_per_position);
            s.compare |= a.compare;
            (Command::Robustness(s), a.common.out)
        }
        Cmd::Baseline(a) => {
            let mut s: BaselineSettings = a.common.load()?;
            set(&mut s.seed, a.common.seed);
            set(&mut s.input_mode, a.common.input_mode);
            set(&mut s.policy, a.policy);
            set(&mut s.episodes, a.episodes);
            (Command::Baseline(s), a.common.out)
        }
        Cmd::Rerun { manifest, out } => (harness::Manifest::read(&manifest)?.command()?, out),
    })
}

fn run(cmd: Cmd) -> Result<()> {
    let (command, out) = resolve(cmd)?;
    let outcome = harness::execute(&command, Path::new(&out))?;
    println!("{}", outcome.summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
