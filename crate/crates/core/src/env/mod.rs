//! Environments: the MicroMario platformer, its observation pipeline, and a
//! tiny corridor MDP used for tabular sanity checks.

pub mod corridor;
pub mod level;
mod micromario;
mod render;
mod score;

pub use corridor::Corridor;
pub use level::{generate_level, generate_level_with_width, scripted_oracle_action, Level, Tile};
pub use micromario::{Action, AgentState, MicroMario, StepInfo, StepResult, ACTIONS};
pub use render::{preprocess, render_frame, FrameStacker, ObsConfig, ObservationStack};
pub use score::ExactSum;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called after the episode finished; call reset first")]
    StepAfterDone,
    #[error("action index {0} is out of range")]
    InvalidAction(usize),
    #[error("level generation for seed {seed} failed the solvability check after {attempts} attempts")]
    Unsolvable { seed: u64, attempts: usize },
    #[error("invalid level: {0}")]
    InvalidLevel(String),
    #[error("frame dimensions {width}x{height} are not divisible by pool factor {factor}")]
    Pooling {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One transition as seen by a learner.
#[derive(Clone, Debug)]
pub struct EnvStep {
    pub obs: ObservationStack,
    pub reward: f64,
    /// Terminal state reached (death or goal).
    pub done: bool,
    pub died: bool,
    pub distance: i64,
    pub moves: u64,
}

/// Gym-style interface shared by every trainer.
pub trait Environment {
    fn num_actions(&self) -> usize;
    fn observation_shape(&self) -> [usize; 3];
    fn reset(&mut self) -> ObservationStack;
    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError>;
    /// Current progress in distance units.
    fn distance(&self) -> i64;
}

/// Produces a fresh environment for a task index.
pub trait EnvFactory {
    type Env: Environment;

    fn num_tasks(&self) -> usize;
    fn make(&self, task: usize) -> Self::Env;
}

/// A fixed list of levels sharing one observation configuration.
#[derive(Clone, Debug)]
pub struct LevelSet {
    pub levels: Vec<std::sync::Arc<Level>>,
    pub obs: ObsConfig,
}

impl LevelSet {
    pub fn new(levels: Vec<Level>, obs: ObsConfig) -> Self {
        Self {
            levels: levels.into_iter().map(std::sync::Arc::new).collect(),
            obs,
        }
    }

    pub fn generate(seeds: &[u64], difficulty: u32, width: usize, obs: ObsConfig) -> Result<Self, EnvError> {
        let levels = seeds
            .iter()
            .map(|&s| generate_level_with_width(s, difficulty, width))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(levels, obs))
    }
}

impl EnvFactory for LevelSet {
    type Env = MicroMario;

    fn num_tasks(&self) -> usize {
        self.levels.len()
    }

    fn make(&self, task: usize) -> MicroMario {
        MicroMario::new(self.levels[task].clone(), self.obs)
    }
}
