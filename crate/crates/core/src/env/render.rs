//! Grayscale viewport rendering and the frame-stack observation pipeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::level::Level;
use super::micromario::AgentState;
use super::EnvError;
use crate::tensor::Tensor;

pub const VIEW_TILES_X: usize = 16;
pub const VIEW_TILES_Y: usize = 12;
pub const PIXELS_PER_TILE: usize = 2;
pub const FRAME_WIDTH: usize = VIEW_TILES_X * PIXELS_PER_TILE;
pub const FRAME_HEIGHT: usize = VIEW_TILES_Y * PIXELS_PER_TILE;
pub const AGENT_INTENSITY: f64 = 0.5;

/// Renders a `(32, 24)` frame indexed `[px, py]` with `py = 0` at the top.
/// The viewport is centred on the agent and clamped to the level.
pub fn render_frame(level: &Level, agent: &AgentState) -> Tensor {
    let max_x0 = level.width.saturating_sub(VIEW_TILES_X) as i32;
    let max_y0 = level.height.saturating_sub(VIEW_TILES_Y) as i32;
    let x0 = (agent.x - VIEW_TILES_X as i32 / 2).clamp(0, max_x0);
    let y0 = (agent.y - VIEW_TILES_Y as i32 / 2).clamp(0, max_y0);
    let mut data = vec![0.0; FRAME_WIDTH * FRAME_HEIGHT];
    for px in 0..FRAME_WIDTH {
        let tx = x0 + (px / PIXELS_PER_TILE) as i32;
        for py in 0..FRAME_HEIGHT {
            let ty = y0 + ((FRAME_HEIGHT - 1 - py) / PIXELS_PER_TILE) as i32;
            let v = if tx == agent.x && ty == agent.y {
                AGENT_INTENSITY
            } else {
                level.tile(tx, ty).intensity()
            };
            data[px * FRAME_HEIGHT + py] = v;
        }
    }
    Tensor::new(vec![FRAME_WIDTH, FRAME_HEIGHT], data).expect("frame dims")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub frames: usize,
    pub pool_factor: usize,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            pool_factor: 1,
        }
    }
}

impl ObsConfig {
    pub fn shape(&self) -> [usize; 3] {
        [
            FRAME_WIDTH / self.pool_factor,
            FRAME_HEIGHT / self.pool_factor,
            self.frames,
        ]
    }
}

/// A `(W, H, C)` stack of preprocessed frames, newest in the last channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStack(Tensor);

impl ObservationStack {
    pub fn new(t: Tensor) -> Result<Self, EnvError> {
        if t.rank() != 3 {
            return Err(EnvError::InvalidLevel(format!(
                "observations are (W,H,C), got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    /// Channel `c` as a `(W, H)` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let [_, _, ch] = self.shape();
        self.0.data().iter().skip(c).step_by(ch).copied().collect()
    }
}

/// Average-pools each `(W, H)` frame by `pool_factor` and stacks them along
/// a trailing channel axis in the given order.
pub fn preprocess(history: &[Tensor], pool_factor: usize) -> Result<ObservationStack, EnvError> {
    let first = history
        .first()
        .ok_or_else(|| EnvError::InvalidLevel("no frames to stack".into()))?;
    let (w, h) = match first.shape() {
        [w, h] => (*w, *h),
        s => return Err(EnvError::InvalidLevel(format!("frames are (W,H), got {s:?}"))),
    };
    if pool_factor == 0 || w % pool_factor != 0 || h % pool_factor != 0 {
        return Err(EnvError::Pooling {
            width: w,
            height: h,
            factor: pool_factor,
        });
    }
    let (ow, oh, c) = (w / pool_factor, h / pool_factor, history.len());
    let norm = (pool_factor * pool_factor) as f64;
    let mut out = vec![0.0; ow * oh * c];
    for (ci, frame) in history.iter().enumerate() {
        if frame.shape() != first.shape() {
            return Err(EnvError::InvalidLevel("frames differ in size".into()));
        }
        let f = frame.data();
        for x in 0..ow {
            for y in 0..oh {
                let mut acc = 0.0;
                for dx in 0..pool_factor {
                    for dy in 0..pool_factor {
                        acc += f[(x * pool_factor + dx) * h + y * pool_factor + dy];
                    }
                }
                out[(x * oh + y) * c + ci] = if pool_factor == 1 { acc } else { acc / norm };
            }
        }
    }
    ObservationStack::new(Tensor::new(vec![ow, oh, c], out)?)
}

/// Keeps the last `frames` raw frames and emits preprocessed stacks.
#[derive(Clone, Debug)]
pub struct FrameStacker {
    cfg: ObsConfig,
    history: VecDeque<Tensor>,
}

impl FrameStacker {
    pub fn new(cfg: ObsConfig) -> Self {
        Self {
            cfg,
            history: VecDeque::with_capacity(cfg.frames),
        }
    }

    /// Fills every slot with `frame`.
    pub fn reset(&mut self, frame: Tensor) -> Result<ObservationStack, EnvError> {
        self.history.clear();
        for _ in 0..self.cfg.frames {
            self.history.push_back(frame.clone());
        }
        self.current()
    }

    pub fn push(&mut self, frame: Tensor) -> Result<ObservationStack, EnvError> {
        if self.history.len() == self.cfg.frames {
            self.history.pop_front();
        }
        self.history.push_back(frame);
        self.current()
    }

    fn current(&self) -> Result<ObservationStack, EnvError> {
        let frames: Vec<Tensor> = self.history.iter().cloned().collect();
        preprocess(&frames, self.cfg.pool_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::level::GROUND_ROWS;
    use crate::env::MicroMario;
    use std::sync::Arc;

    fn frame_from(w: usize, h: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![w, h], data).unwrap()
    }

    #[test]
    fn sky_above_flat_ground_is_empty() {
        let level = Level::flat(60, 50).unwrap();
        let agent = AgentState::spawn(&level);
        let f = render_frame(&level, &agent);
        assert_eq!(f.shape(), &[FRAME_WIDTH, FRAME_HEIGHT]);
        // viewport rows 0..12 tiles, ground occupies the bottom 2 tiles = 4 px
        let ground_px = GROUND_ROWS * PIXELS_PER_TILE;
        let mut agent_px = 0;
        for px in 0..FRAME_WIDTH {
            for py in 0..FRAME_HEIGHT - ground_px {
                let v = f.data()[px * FRAME_HEIGHT + py];
                if v == AGENT_INTENSITY {
                    agent_px += 1;
                } else {
                    assert_eq!(v, 0.0, "pixel ({px},{py})");
                }
            }
            for py in FRAME_HEIGHT - ground_px..FRAME_HEIGHT {
                assert_eq!(f.data()[px * FRAME_HEIGHT + py], 1.0);
            }
        }
        assert_eq!(agent_px, 4);
    }

    #[test]
    fn agent_cells_are_exactly_its_tile() {
        let level = Level::flat(60, 50).unwrap();
        let mut agent = AgentState::spawn(&level);
        agent.x = 30;
        let f = render_frame(&level, &agent);
        // agent is centred: tile column 8 of the viewport, tile row 2 from the bottom
        let cells: Vec<(usize, usize)> = (0..FRAME_WIDTH)
            .flat_map(|px| (0..FRAME_HEIGHT).map(move |py| (px, py)))
            .filter(|&(px, py)| f.data()[px * FRAME_HEIGHT + py] == AGENT_INTENSITY)
            .collect();
        let top = FRAME_HEIGHT - 1 - (2 * PIXELS_PER_TILE + 1);
        assert_eq!(cells, vec![(16, top), (16, top + 1), (17, top), (17, top + 1)]);
        assert_eq!(render_frame(&level, &agent), f);
    }

    #[test]
    fn pooling_examples() {
        let a = frame_from(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let obs = preprocess(&[a.clone()], 2).unwrap();
        assert_eq!(obs.tensor().data(), &[0.5]);
        let same = preprocess(&[a.clone(), a.clone()], 1).unwrap();
        assert_eq!(same.channel(0), a.data());
        assert_eq!(same.channel(1), a.data());
        let c = frame_from(4, 6, vec![0.8; 24]);
        for p in [1, 2] {
            let o = preprocess(&[c.clone()], p).unwrap();
            assert!(o.tensor().data().iter().all(|&v| v == 0.8));
        }
        assert!(matches!(preprocess(&[c], 4), Err(EnvError::Pooling { .. })));
    }

    #[test]
    fn reset_fills_stack_with_first_frame() {
        let level = Arc::new(Level::flat(60, 50).unwrap());
        let mut env = MicroMario::new(level, ObsConfig::default());
        let obs = env.reset();
        assert_eq!(obs.shape(), [32, 24, 4]);
        let c0 = obs.channel(0);
        for c in 1..4 {
            let diff = obs
                .channel(c)
                .iter()
                .zip(&c0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert_eq!(diff, 0.0);
        }
        assert_eq!(env.reset(), obs);
    }

    #[test]
    fn newest_frame_is_last() {
        let mut s = FrameStacker::new(ObsConfig {
            frames: 3,
            pool_factor: 1,
        });
        let f = |v| frame_from(2, 2, vec![v; 4]);
        s.reset(f(0.0)).unwrap();
        s.push(f(1.0)).unwrap();
        let o = s.push(f(2.0)).unwrap();
        assert_eq!(o.channel(0), vec![0.0; 4]);
        assert_eq!(o.channel(1), vec![1.0; 4]);
        assert_eq!(o.channel(2), vec![2.0; 4]);
    }
}
