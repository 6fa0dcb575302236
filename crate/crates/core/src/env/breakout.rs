//! Miniature Breakout on a native 80x80 screen.
//!
//! Layout (rows top to bottom): empty ceiling band, six rows of sixteen
//! bricks starting at row 8 (each drawn as a 2-pixel dash), open field, the
//! paddle on rows 72..75, and an empty floor band below it. The ball moves
//! `ball_speed` pixels per tick along each axis. It is lost as
//! soon as it reaches the paddle row outside the paddle, so nothing is ever
//! drawn below the paddle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCREEN: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Fire = 1,
    Right = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Noop, Action::Fire, Action::Right, Action::Left];

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("action", format!("index {i} out of range 0..4")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub paddle_width: usize,
    pub paddle_height: usize,
    pub paddle_row: usize,
    pub paddle_speed: usize,
    /// Side of the square drawn around the ball's position (odd).
    pub ball_size: usize,
    /// Pixels per tick along each axis.
    pub ball_speed: usize,
    pub brick_rows: usize,
    pub brick_cols: usize,
    pub brick_top: usize,
    /// Height of one brick cell (the drawn brick occupies its top row).
    pub brick_height: usize,
    /// Row where a served ball appears, moving down.
    pub serve_row: usize,
    /// Ticks a held ball waits for `Fire` before launching by itself.
    pub serve_delay: usize,
    pub lives: u32,
    /// Episode is truncated after this many ticks.
    pub max_steps: usize,
    /// Ticks each action is repeated for. A step stops early on a lost life
    /// or the end of the episode.
    pub frame_skip: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            paddle_width: 16,
            paddle_height: 3,
            paddle_row: 72,
            paddle_speed: 4,
            ball_size: 3,
            ball_speed: 2,
            brick_rows: 6,
            brick_cols: 16,
            brick_top: 8,
            brick_height: 2,
            serve_row: 24,
            serve_delay: 16,
            lives: 5,
            max_steps: 4000,
            frame_skip: 2,
        }
    }
}

impl EnvConfig {
    pub fn brick_width(&self) -> usize {
        SCREEN / self.brick_cols
    }

    pub fn brick_count(&self) -> usize {
        self.brick_rows * self.brick_cols
    }

    fn brick_at(&self, row: i32, col: i32) -> Option<usize> {
        let top = self.brick_top as i32;
        let bottom = top + (self.brick_rows * self.brick_height) as i32;
        if row < top || row >= bottom || col < 0 || col >= SCREEN as i32 {
            return None;
        }
        let r = (row - top) as usize / self.brick_height;
        let c = col as usize / self.brick_width();
        Some(r * self.brick_cols + c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub paddle_x: usize,
    /// `(row, col)`; meaningful only while the ball is in play.
    pub ball_pos: (f32, f32),
    /// `(drow, dcol)`, each of magnitude `ball_speed`.
    pub ball_vel: (f32, f32),
    pub ball_in_play: bool,
    pub hold_ticks: usize,
    pub bricks: Vec<bool>,
    pub lives: u32,
    pub score: u32,
    pub steps: usize,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f32,
    pub done: bool,
    pub life_lost: bool,
}

#[derive(Clone, Debug)]
pub struct Breakout {
    config: EnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl Breakout {
    pub fn new(config: EnvConfig, seed: u64) -> Self {
        let state = EnvState {
            paddle_x: (SCREEN - config.paddle_width) / 2,
            ball_pos: (0.0, 0.0),
            ball_vel: (0.0, 0.0),
            ball_in_play: false,
            hold_ticks: 0,
            bricks: vec![true; config.brick_count()],
            lives: config.lives,
            score: 0,
            steps: 0,
            done: false,
        };
        Breakout {
            config,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reset(seed: u64) -> Self {
        Breakout::new(EnvConfig::default(), seed)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn bricks_remaining(&self) -> usize {
        self.state.bricks.iter().filter(|&&b| b).count()
    }

    /// Apply `action` for `frame_skip` ticks and sum the rewards.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::Protocol("step called on a finished episode".into()));
        }
        let mut total = StepOutcome {
            reward: 0.0,
            done: false,
            life_lost: false,
        };
        for _ in 0..self.config.frame_skip.max(1) {
            let out = self.tick(action);
            total.reward += out.reward;
            total.done = out.done;
            total.life_lost = out.life_lost;
            if out.done || out.life_lost {
                break;
            }
        }
        Ok(total)
    }

    fn tick(&mut self, action: Action) -> StepOutcome {
        let Breakout {
            config: cfg,
            state: st,
            rng,
        } = self;
        let max_x = SCREEN - cfg.paddle_width;
        st.steps += 1;
        match action {
            Action::Left => st.paddle_x = st.paddle_x.saturating_sub(cfg.paddle_speed),
            Action::Right => st.paddle_x = (st.paddle_x + cfg.paddle_speed).min(max_x),
            Action::Noop | Action::Fire => {}
        }

        let mut reward = 0.0;
        let mut life_lost = false;
        if !st.ball_in_play {
            st.hold_ticks += 1;
            if action == Action::Fire || st.hold_ticks >= cfg.serve_delay {
                serve(cfg, st, rng);
            }
        } else {
            let speed = cfg.ball_speed as i32;
            let (r, c) = (st.ball_pos.0 as i32, st.ball_pos.1 as i32);
            let (mut dr, mut dc) = (st.ball_vel.0 as i32, st.ball_vel.1 as i32);
            let mut nc = c + dc;
            if nc < 0 || nc >= SCREEN as i32 {
                dc = -dc;
                nc = c + dc;
            }
            let mut nr = r + dr;
            if nr < 0 {
                dr = speed;
                nr = r + speed;
            }
            if let Some(b) = cfg.brick_at(nr, nc).filter(|&b| st.bricks[b]) {
                st.bricks[b] = false;
                st.score += 1;
                reward = 1.0;
                dr = -dr;
                nr = r;
                nc = c;
            } else if nr >= cfg.paddle_row as i32 {
                let px = st.paddle_x as i32;
                let w = cfg.paddle_width as i32;
                if nc >= px && nc < px + w {
                    let offset = nc - px;
                    let third = w / 3;
                    if offset < third {
                        dc = -speed;
                    } else if offset >= w - third {
                        dc = speed;
                    }
                    dr = -speed;
                    nr = r;
                } else {
                    st.ball_in_play = false;
                    st.hold_ticks = 0;
                    st.lives -= 1;
                    life_lost = true;
                }
            }
            st.ball_pos = (nr as f32, nc as f32);
            st.ball_vel = (dr as f32, dc as f32);
        }

        if st.lives == 0 || st.bricks.iter().all(|b| !b) || st.steps >= cfg.max_steps {
            st.done = true;
        }
        StepOutcome {
            reward,
            done: st.done,
            life_lost,
        }
    }

    /// Grayscale screen in `[0, 1]`.
    pub fn frame(&self) -> Tensor {
        let cfg = &self.config;
        let st = &self.state;
        let mut px = vec![0.0f32; SCREEN * SCREEN];
        let bw = cfg.brick_width();
        for r in 0..cfg.brick_rows {
            let shade = 1.0 - 0.07 * r as f32;
            let row = cfg.brick_top + r * cfg.brick_height;
            for c in 0..cfg.brick_cols {
                if st.bricks[r * cfg.brick_cols + c] {
                    for x in c * bw + 1..c * bw + 3 {
                        px[row * SCREEN + x] = shade;
                    }
                }
            }
        }
        for y in cfg.paddle_row..(cfg.paddle_row + cfg.paddle_height).min(SCREEN) {
            for x in st.paddle_x..st.paddle_x + cfg.paddle_width {
                px[y * SCREEN + x] = 0.8;
            }
        }
        if st.ball_in_play {
            let (r, c) = (st.ball_pos.0 as usize, st.ball_pos.1 as usize);
            let half = cfg.ball_size / 2;
            for y in r.saturating_sub(half)..(r + half + 1).min(SCREEN) {
                for x in c.saturating_sub(half)..(c + half + 1).min(SCREEN) {
                    px[y * SCREEN + x] = 1.0;
                }
            }
        }
        Tensor::new(vec![SCREEN, SCREEN], px).expect("screen shape")
    }
}

fn serve(cfg: &EnvConfig, st: &mut EnvState, rng: &mut ChaCha8Rng) {
    let col = rng.gen_range(4..(SCREEN - 4)) as f32;
    let v = cfg.ball_speed as f32;
    let dcol = if rng.gen_bool(0.5) { v } else { -v };
    st.ball_pos = (cfg.serve_row as f32, col);
    st.ball_vel = (v, dcol);
    st.ball_in_play = true;
    st.hold_ticks = 0;
}
