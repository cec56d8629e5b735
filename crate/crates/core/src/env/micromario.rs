use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::level::Level;
use super::render::{render_frame, FrameStacker, ObsConfig, ObservationStack};
use super::score::ExactSum;
use super::{EnvError, EnvStep, Environment};
use crate::tensor::Tensor;

pub const JUMP_VELOCITY: i32 = 4;
pub const MAX_FALL_SPEED: i32 = 4;
/// Below this row the agent is dead.
pub const DEATH_Y: i32 = -1;
pub const STEP_COST: f64 = 0.1;
pub const FLAG_BONUS: f64 = 500.0;
pub const DEATH_PENALTY: f64 = 100.0;
/// Distance units per tile.
pub const DISTANCE_SCALE: i64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Noop = 0,
    Right = 1,
    RightJump = 2,
    Jump = 3,
    Left = 4,
}

pub const ACTIONS: [Action; 5] = [
    Action::Noop,
    Action::Right,
    Action::RightJump,
    Action::Jump,
    Action::Left,
];

impl Action {
    pub fn from_index(i: usize) -> Option<Self> {
        ACTIONS.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn dx(self) -> i32 {
        match self {
            Action::Right | Action::RightJump => 1,
            Action::Left => -1,
            Action::Noop | Action::Jump => 0,
        }
    }

    fn jumps(self) -> bool {
        matches!(self, Action::Jump | Action::RightJump)
    }
}

/// Agent position in tiles. The agent occupies the single tile `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: i32,
    pub y: i32,
    pub vx: i32,
    pub vy: i32,
    pub on_ground: bool,
}

impl AgentState {
    pub fn spawn(level: &Level) -> Self {
        Self {
            x: level.spawn.0 as i32,
            y: level.spawn.1 as i32,
            vx: 0,
            vy: 0,
            on_ground: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Outcome {
    pub dx: i32,
    pub died: bool,
    pub reached_flag: bool,
}

/// One physics tick: horizontal move, then vertical motion one tile per
/// sub-step, then gravity.
pub(crate) fn advance(level: &Level, s: &mut AgentState, action: Action) -> Outcome {
    let x0 = s.x;
    s.vx = action.dx();
    if action.jumps() && s.on_ground {
        s.vy = JUMP_VELOCITY;
    }

    if s.vx != 0 {
        let nx = s.x + s.vx;
        if nx < 0 || nx as usize >= level.width || level.is_solid(nx, s.y) {
            s.vx = 0;
        } else {
            s.x = nx;
        }
    }

    let dir = s.vy.signum();
    for _ in 0..s.vy.abs() {
        let ny = s.y + dir;
        if level.is_solid(s.x, ny) {
            if dir > 0 {
                s.vy = 0;
            }
            break;
        }
        s.y = ny;
        if s.y < DEATH_Y {
            break;
        }
    }

    if s.vy <= 0 && level.is_solid(s.x, s.y - 1) {
        s.on_ground = true;
        s.vy = 0;
    } else {
        s.on_ground = false;
        s.vy = (s.vy - 1).max(-MAX_FALL_SPEED);
    }

    Outcome {
        dx: s.x - x0,
        died: s.y < DEATH_Y,
        reached_flag: s.x >= level.goal_x as i32,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Current position in distance units (tiles × 10).
    pub distance: i64,
    /// Sum of all rewards emitted this episode.
    pub score: f64,
    pub moves: u64,
    pub flag: bool,
    pub died: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub frame: Tensor,
    pub obs: ObservationStack,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// The platformer environment.
#[derive(Clone, Debug)]
pub struct MicroMario {
    level: Arc<Level>,
    obs_cfg: ObsConfig,
    agent: AgentState,
    moves: u64,
    score: ExactSum,
    done: bool,
    stacker: FrameStacker,
}

impl MicroMario {
    pub fn new(level: Arc<Level>, obs_cfg: ObsConfig) -> Self {
        let agent = AgentState::spawn(&level);
        let mut env = Self {
            stacker: FrameStacker::new(obs_cfg),
            level,
            obs_cfg,
            agent,
            moves: 0,
            score: ExactSum::new(),
            done: false,
        };
        env.reset_state();
        env
    }

    pub fn level(&self) -> &Level {
        &self.level
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn info(&self) -> StepInfo {
        StepInfo {
            distance: self.agent.x as i64 * DISTANCE_SCALE,
            score: self.score.value(),
            moves: self.moves,
            flag: self.agent.x >= self.level.goal_x as i32,
            died: self.agent.y < DEATH_Y,
        }
    }

    fn reset_state(&mut self) -> ObservationStack {
        self.agent = AgentState::spawn(&self.level);
        self.moves = 0;
        self.score = ExactSum::new();
        self.done = false;
        let frame = render_frame(&self.level, &self.agent);
        self.stacker
            .reset(frame)
            .expect("frame size is validated by ObsConfig")
    }

    pub fn reset(&mut self) -> ObservationStack {
        self.reset_state()
    }

    pub fn frame(&self) -> Tensor {
        render_frame(&self.level, &self.agent)
    }

    pub fn step_action(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let out = advance(&self.level, &mut self.agent, action);
        self.moves += 1;
        let mut reward = out.dx as f64 * DISTANCE_SCALE as f64 - STEP_COST;
        if out.died {
            reward -= DEATH_PENALTY;
        } else if out.reached_flag {
            reward += FLAG_BONUS;
        }
        self.score.add(reward);
        self.done = out.died || out.reached_flag;
        let frame = render_frame(&self.level, &self.agent);
        let obs = self.stacker.push(frame.clone())?;
        Ok(StepResult {
            frame,
            obs,
            reward,
            done: self.done,
            info: self.info(),
        })
    }

    pub fn obs_config(&self) -> ObsConfig {
        self.obs_cfg
    }
}

impl Environment for MicroMario {
    fn num_actions(&self) -> usize {
        ACTIONS.len()
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.obs_cfg.shape()
    }

    fn reset(&mut self) -> ObservationStack {
        self.reset_state()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError> {
        let a = Action::from_index(action).ok_or(EnvError::InvalidAction(action))?;
        let r = self.step_action(a)?;
        Ok(EnvStep {
            obs: r.obs,
            reward: r.reward,
            done: r.done,
            died: r.info.died,
            distance: r.info.distance,
            moves: r.info.moves,
        })
    }

    fn distance(&self) -> i64 {
        self.agent.x as i64 * DISTANCE_SCALE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::level::{Level, GROUND_ROWS};

    fn flat_env() -> MicroMario {
        MicroMario::new(Arc::new(Level::flat(60, 50).unwrap()), ObsConfig::default())
    }

    #[test]
    fn noop_on_flat_ground() {
        let mut env = flat_env();
        env.reset();
        let r = env.step_action(Action::Noop).unwrap();
        assert_eq!(r.reward, -0.1);
        assert_eq!(r.info.distance, 20);
        assert!(!r.done);
    }

    #[test]
    fn ten_steps_right() {
        let mut env = flat_env();
        env.reset();
        for k in 1..=10 {
            let r = env.step_action(Action::Right).unwrap();
            assert_eq!(r.reward, 10.0 - 0.1);
            assert_eq!(r.info.moves, k);
        }
        assert_eq!(env.agent().x, 12);
        assert_eq!(env.info().score, 99.0);
    }

    #[test]
    fn reset_reports_spawn_distance() {
        let mut env = flat_env();
        env.reset();
        assert_eq!(env.info().distance, 2 * 10);
        assert_eq!(env.info().moves, 0);
        assert_eq!(env.info().score, 0.0);
    }

    #[test]
    fn jump_arc() {
        let mut env = flat_env();
        env.reset();
        let mut heights = vec![];
        for _ in 0..9 {
            env.step_action(Action::RightJump).unwrap();
            heights.push(env.agent().y - GROUND_ROWS as i32);
        }
        assert_eq!(heights, vec![4, 7, 9, 10, 10, 9, 7, 4, 0]);
        assert!(env.agent().on_ground);
        assert_eq!(env.agent().x, 11);
    }

    #[test]
    fn falling_into_a_gap_kills() {
        let level = Level::from_ascii(&[
            "...........F.",
            "...........F.",
            ".M.........F.",
            "####.....####",
            "####.....####",
        ])
        .unwrap();
        let mut env = MicroMario::new(Arc::new(level), ObsConfig::default());
        env.reset();
        // two steps reach the edge, then: off the edge, fall 1, fall 2, fall 3
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let r = env.step_action(Action::Right).unwrap();
            total += r.reward;
            steps += 1;
            if r.done {
                assert!(r.info.died);
                assert!((r.reward - (9.9 - 100.0)).abs() < 1e-9);
                break;
            }
            assert!(steps < 10);
        }
        assert_eq!(steps, 6);
        assert!((total - (5.0 * 9.9 + 9.9 - 100.0)).abs() < 1e-9);
        assert!(matches!(env.step_action(Action::Noop), Err(EnvError::StepAfterDone)));
    }

    #[test]
    fn walls_block_and_no_tunnelling() {
        let level = Level::from_ascii(&[
            "...BB...........",
            "................",
            "......P.......F.",
            ".M....P.......F.",
            "################",
        ])
        .unwrap();
        let mut env = MicroMario::new(Arc::new(level), ObsConfig::default());
        env.reset();
        for _ in 0..4 {
            env.step_action(Action::Right).unwrap();
        }
        assert_eq!(env.agent().x, 5);
        let r = env.step_action(Action::Right).unwrap();
        assert_eq!(env.agent().x, 5);
        assert_eq!(r.reward, -0.1);
        // jump under the brick row bonks at the ceiling
        let mut env2 = env.clone();
        env2.reset();
        env2.step_action(Action::Right).unwrap();
        env2.step_action(Action::Right).unwrap();
        env2.step_action(Action::Jump).unwrap();
        assert_eq!(env2.agent().y, 3);
        assert_eq!(env2.agent().vy, -1);
    }

    #[test]
    fn reaching_flag_pays_bonus() {
        let level = Level::flat(20, 3).unwrap();
        let mut env = MicroMario::new(Arc::new(level), ObsConfig::default());
        env.reset();
        let r = env.step_action(Action::Right).unwrap();
        assert!(r.done && r.info.flag);
        assert_eq!(r.reward, 10.0 - 0.1 + 500.0);
    }

    #[test]
    fn invalid_action_index() {
        let mut env = flat_env();
        assert!(matches!(Environment::step(&mut env, 5), Err(EnvError::InvalidAction(5))));
    }
}
