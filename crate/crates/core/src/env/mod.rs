//! Miniature Breakout and its observation pipeline.

mod breakout;
mod preprocess;

pub use breakout::{Action, Breakout, EnvConfig, EnvState, StepOutcome, SCREEN};
pub use preprocess::*;
