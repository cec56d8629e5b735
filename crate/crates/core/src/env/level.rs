//! Seeded level generation and the scripted solvability oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::micromario::{advance, Action, AgentState};
use super::EnvError;

pub const DEFAULT_WIDTH: usize = 300;
pub const DEFAULT_HEIGHT: usize = 15;
/// Rows `0..GROUND_ROWS` are ground; the walking surface is `y = GROUND_ROWS`.
pub const GROUND_ROWS: usize = 2;
pub const MAX_GAP: usize = 6;
const SPAWN_X: usize = 2;
const SAFE_START: usize = 14;
const GOAL_MARGIN: usize = 6;
const SAFE_END: usize = 12;
const FLAG_HEIGHT: usize = 8;
/// Clear columns required after a hazard so a jump can land.
const LANDING: usize = 10;
/// Columns from take-off to touchdown of a full running jump.
const JUMP_REACH: usize = 9;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum Tile {
    Sky = 0,
    Ground = 1,
    Block = 2,
    Pipe = 3,
    Flag = 4,
}

impl Tile {
    pub fn is_solid(self) -> bool {
        matches!(self, Tile::Ground | Tile::Block | Tile::Pipe)
    }

    /// Grayscale intensity used by the renderer.
    pub fn intensity(self) -> f64 {
        match self {
            Tile::Sky => 0.0,
            Tile::Ground => 1.0,
            Tile::Block => 0.8,
            Tile::Pipe => 0.6,
            Tile::Flag => 0.9,
        }
    }
}

impl From<Tile> for u8 {
    fn from(t: Tile) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for Tile {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        Ok(match v {
            0 => Tile::Sky,
            1 => Tile::Ground,
            2 => Tile::Block,
            3 => Tile::Pipe,
            4 => Tile::Flag,
            _ => return Err(format!("unknown tile code {v}")),
        })
    }
}

/// A tile grid. `tiles[y * width + x]`, with `y = 0` the bottom row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub seed: u64,
    pub difficulty: u32,
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<Tile>,
    pub spawn: (usize, usize),
    pub goal_x: usize,
}

impl Level {
    /// Outside the grid is open: nothing above the top, nothing below the
    /// bottom, walls beyond the left and right edges are handled by physics.
    pub fn tile(&self, x: i32, y: i32) -> Tile {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return Tile::Sky;
        }
        self.tiles[y as usize * self.width + x as usize]
    }

    pub fn is_solid(&self, x: i32, y: i32) -> bool {
        self.tile(x, y).is_solid()
    }

    fn set(&mut self, x: usize, y: usize, t: Tile) {
        self.tiles[y * self.width + x] = t;
    }

    fn blank(seed: u64, difficulty: u32, width: usize, height: usize) -> Self {
        let mut level = Self {
            seed,
            difficulty,
            width,
            height,
            tiles: vec![Tile::Sky; width * height],
            spawn: (SPAWN_X, GROUND_ROWS),
            goal_x: width - GOAL_MARGIN,
        };
        for y in 0..GROUND_ROWS {
            for x in 0..width {
                level.set(x, y, Tile::Ground);
            }
        }
        level
    }

    fn plant_flag(&mut self) {
        let top = (GROUND_ROWS + FLAG_HEIGHT).min(self.height);
        for y in GROUND_ROWS..top {
            self.set(self.goal_x, y, Tile::Flag);
        }
    }

    /// Flat ground with the flag at `goal_x`.
    pub fn flat(width: usize, goal_x: usize) -> Result<Self, EnvError> {
        if goal_x <= SPAWN_X || goal_x >= width {
            return Err(EnvError::InvalidLevel(format!(
                "goal column {goal_x} must lie between spawn {SPAWN_X} and width {width}"
            )));
        }
        let mut level = Self::blank(0, 0, width, DEFAULT_HEIGHT);
        level.goal_x = goal_x;
        level.plant_flag();
        level.validate()?;
        Ok(level)
    }

    /// Parses a hand-drawn level, top row first: `.` sky, `#` ground,
    /// `B` block, `P` pipe, `F` flag, `M` spawn (sky).
    pub fn from_ascii(rows: &[&str]) -> Result<Self, EnvError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(EnvError::InvalidLevel("rows must be non-empty and equally long".into()));
        }
        let mut tiles = vec![Tile::Sky; width * height];
        let mut spawn = None;
        let mut goal = None;
        for (r, row) in rows.iter().enumerate() {
            let y = height - 1 - r;
            for (x, ch) in row.chars().enumerate() {
                let t = match ch {
                    '.' => Tile::Sky,
                    '#' => Tile::Ground,
                    'B' => Tile::Block,
                    'P' => Tile::Pipe,
                    'F' => {
                        goal = Some(x);
                        Tile::Flag
                    }
                    'M' => {
                        spawn = Some((x, y));
                        Tile::Sky
                    }
                    c => return Err(EnvError::InvalidLevel(format!("unknown tile char {c:?}"))),
                };
                tiles[y * width + x] = t;
            }
        }
        let level = Self {
            seed: 0,
            difficulty: 0,
            width,
            height,
            tiles,
            spawn: spawn.ok_or_else(|| EnvError::InvalidLevel("no spawn".into()))?,
            goal_x: goal.ok_or_else(|| EnvError::InvalidLevel("no flag".into()))?,
        };
        level.validate()?;
        Ok(level)
    }

    /// Columns with no ground in the bottom row.
    pub fn gap_columns(&self) -> Vec<usize> {
        (0..self.width).filter(|&x| self.tile(x as i32, 0) != Tile::Ground).collect()
    }

    /// Widths of maximal runs of bottomless columns, left to right.
    pub fn gaps(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for x in 0..=self.width {
            let open = x < self.width && !self.is_solid(x as i32, 0);
            match (open, start) {
                (true, None) => start = Some(x),
                (false, Some(s)) => {
                    out.push((s, x - s));
                    start = None;
                }
                _ => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidLevel(m));
        if self.tiles.len() != self.width * self.height {
            return bad(format!(
                "{} tiles for a {}x{} grid",
                self.tiles.len(),
                self.width,
                self.height
            ));
        }
        let flag_cols: Vec<usize> = (0..self.width)
            .filter(|&x| (0..self.height).any(|y| self.tile(x as i32, y as i32) == Tile::Flag))
            .collect();
        if flag_cols != [self.goal_x] {
            return bad(format!("flag columns {flag_cols:?}, expected exactly [{}]", self.goal_x));
        }
        let (sx, sy) = (self.spawn.0 as i32, self.spawn.1 as i32);
        if self.is_solid(sx, sy) || !self.is_solid(sx, sy - 1) {
            return bad(format!("spawn {:?} does not stand on solid ground", self.spawn));
        }
        if let Some(&(x, w)) = self.gaps().iter().find(|&&(_, w)| w > MAX_GAP) {
            return bad(format!("gap of width {w} at column {x} exceeds {MAX_GAP}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("level serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let level: Level =
            serde_json::from_str(s).map_err(|e| EnvError::InvalidLevel(format!("bad level JSON: {e}")))?;
        level.validate()?;
        Ok(level)
    }
}

/// Run right; jump from the ground whenever the next column has nothing to
/// stand on or a wall in the way.
pub fn scripted_oracle_action(level: &Level, s: &AgentState) -> Action {
    if s.on_ground {
        let ahead = s.x + 1;
        if !level.is_solid(ahead, s.y - 1) || level.is_solid(ahead, s.y) {
            return Action::RightJump;
        }
    }
    Action::Right
}

/// Whether the scripted oracle reaches the flag.
pub fn oracle_completes(level: &Level) -> bool {
    let mut s = AgentState::spawn(level);
    for _ in 0..level.width * 4 {
        let action = scripted_oracle_action(level, &s);
        let out = advance(level, &mut s, action);
        if out.reached_flag {
            return true;
        }
        if out.died {
            return false;
        }
    }
    false
}

fn overlaps(reserved: &[(usize, usize)], lo: usize, hi: usize) -> bool {
    reserved.iter().any(|&(a, b)| lo <= b && a <= hi)
}

fn attempt(seed: u64, difficulty: u32, width: usize, rng: &mut ChaCha8Rng) -> Level {
    let mut level = Level::blank(seed, difficulty, width, DEFAULT_HEIGHT);
    let d = difficulty as usize;
    let lo = SAFE_START;
    let hi = level.goal_x.saturating_sub(SAFE_END);
    let span = hi.saturating_sub(lo);
    let max_w = (1 + d).clamp(2, MAX_GAP);
    let mut reserved: Vec<(usize, usize)> = Vec::new();

    // gaps: one per equal segment, each with room for a run-up and landing
    // run-up of 3, then gap plus landing strip spans at least one full jump
    let min_segment = 3 + JUMP_REACH.max(MAX_GAP + 3);
    let gap_count = (3 * d).min(span / min_segment);
    if gap_count > 0 {
        let seg = span / gap_count;
        for i in 0..gap_count {
            let s0 = lo + i * seg;
            let w = rng.gen_range(2..=max_w);
            let land = (JUMP_REACH - w).max(3);
            let start = rng.gen_range(s0 + 3..=s0 + seg - w - land);
            for x in start..start + w {
                for y in 0..level.height {
                    level.set(x, y, Tile::Sky);
                }
            }
            reserved.push((start - 3, start + w + land));
        }
    }

    // pipes: two columns wide, standing on the ground
    let max_h = (1 + d).clamp(2, 4);
    for _ in 0..2 * d {
        for _ in 0..20 {
            let x = rng.gen_range(lo..hi.max(lo + 1));
            let (a, b) = (x.saturating_sub(3), x + 1 + LANDING);
            if b >= hi || overlaps(&reserved, a, b) {
                continue;
            }
            let h = rng.gen_range(2..=max_h);
            for cx in x..x + 2 {
                for y in GROUND_ROWS..GROUND_ROWS + h {
                    level.set(cx, y, Tile::Pipe);
                }
            }
            reserved.push((a, b));
            break;
        }
    }

    // floating bricks over open running stretches
    for _ in 0..d {
        for _ in 0..20 {
            let x = rng.gen_range(lo..hi.max(lo + 1));
            let len = 3;
            if x + len >= hi || overlaps(&reserved, x.saturating_sub(2), x + len + 2) {
                continue;
            }
            for cx in x..x + len {
                level.set(cx, GROUND_ROWS + 4, Tile::Block);
            }
            reserved.push((x, x + len));
            break;
        }
    }

    level.plant_flag();
    level
}

/// Generates a level of the default size.
pub fn generate_level(seed: u64, difficulty: u32) -> Result<Level, EnvError> {
    generate_level_with_width(seed, difficulty, DEFAULT_WIDTH)
}

/// Deterministic in `(seed, difficulty, width)`. Difficulty sets the gap
/// count (`3 × difficulty`, limited by what fits), the maximum gap width
/// (`1 + difficulty`, capped at [`MAX_GAP`]), and the pipe and brick counts.
/// A candidate that the scripted oracle cannot finish is regenerated from a
/// derived sub-seed.
pub fn generate_level_with_width(seed: u64, difficulty: u32, width: usize) -> Result<Level, EnvError> {
    if width < SAFE_START + SAFE_END + GOAL_MARGIN + 2 {
        return Err(EnvError::InvalidLevel(format!("width {width} is too small")));
    }
    for k in 0..MAX_ATTEMPTS as u64 {
        let sub = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let level = attempt(seed, difficulty, width, &mut rng);
        if level.validate().is_ok() && oracle_completes(&level) {
            return Ok(level);
        }
    }
    Err(EnvError::Unsolvable {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}
