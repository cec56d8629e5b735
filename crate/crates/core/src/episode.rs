//! Episode rollouts shared by the trainers and the benchmark harness:
//! move and distance caps, the stagnation rule, and return bookkeeping.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Environment, ExactSum, ObservationStack};
use crate::error::{Error, Result};

/// Tracks moves since the best distance last increased.
#[derive(Clone, Debug)]
pub struct StagnationMonitor {
    threshold: usize,
    best: i64,
    idle: usize,
}

impl StagnationMonitor {
    pub fn new(threshold: usize, start_distance: i64) -> Self {
        Self {
            threshold,
            best: start_distance,
            idle: 0,
        }
    }

    /// Records one move; `true` once `threshold` consecutive moves have not
    /// raised the best distance.
    pub fn observe(&mut self, distance: i64) -> bool {
        if distance > self.best {
            self.best = distance;
            self.idle = 0;
        } else {
            self.idle += 1;
        }
        self.idle >= self.threshold
    }

    pub fn best(&self) -> i64 {
        self.best
    }
}

/// `trace[0]` is the distance at reset and `trace[m]` the distance after move
/// `m`. Returns the first move at which the last `threshold` moves left the
/// running maximum unchanged.
pub fn detect_stagnation_death(trace: &[i64], threshold: usize) -> Option<usize> {
    let (&first, rest) = trace.split_first()?;
    let mut m = StagnationMonitor::new(threshold, first);
    rest.iter().position(|&d| m.observe(d)).map(|i| i + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLimits {
    pub max_moves: u64,
    pub max_distance: Option<i64>,
    pub stagnation: Option<usize>,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        Self {
            max_moves: 5000,
            max_distance: Some(5000),
            stagnation: Some(100),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Goal,
    Pit,
    Stagnation,
    MoveCap,
    DistanceCap,
}

impl EndReason {
    pub fn is_death(self) -> bool {
        matches!(self, EndReason::Pit | EndReason::Stagnation)
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Arc<ObservationStack>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Arc<ObservationStack>,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    /// Exact sum of rewards.
    pub total_reward: f64,
    /// Distance at reset followed by the distance after every move.
    pub trace: Vec<i64>,
    pub end: EndReason,
}

impl Episode {
    pub fn moves(&self) -> u64 {
        self.trace.len() as u64 - 1
    }

    pub fn final_distance(&self) -> i64 {
        *self.trace.last().expect("trace holds the reset distance")
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn returns_to_go(&self, gamma: f64) -> Vec<f64> {
        returns_to_go(&self.rewards(), gamma)
    }
}

/// `G_t = r_t + γ G_{t+1}`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Acts in an episode and sees every transition as it happens.
pub trait Agent {
    fn act(&mut self, obs: &ObservationStack) -> Result<usize>;

    fn observe(&mut self, _transition: &Transition) -> Result<()> {
        Ok(())
    }
}

struct FnAgent<F>(F);

impl<F: FnMut(&ObservationStack) -> Result<usize>> Agent for FnAgent<F> {
    fn act(&mut self, obs: &ObservationStack) -> Result<usize> {
        (self.0)(obs)
    }
}

/// Plays one episode from reset, choosing actions with `choose`. Stops on a
/// terminal state or when a limit trips; limit stops are not terminal.
pub fn run_episode<E, F>(env: &mut E, limits: &EpisodeLimits, choose: F) -> Result<Episode>
where
    E: Environment + ?Sized,
    F: FnMut(&ObservationStack) -> Result<usize>,
{
    run_agent_episode(env, limits, &mut FnAgent(choose))
}

/// [`run_episode`] for an agent that also observes each transition.
pub fn run_agent_episode<E, A>(env: &mut E, limits: &EpisodeLimits, agent: &mut A) -> Result<Episode>
where
    E: Environment + ?Sized,
    A: Agent + ?Sized,
{
    if limits.max_moves == 0 {
        return Err(Error::Config("max_moves must be positive".into()));
    }
    let mut obs = Arc::new(env.reset());
    let start = env.distance();
    let mut trace = vec![clamp_distance(start, limits)];
    let mut monitor = limits.stagnation.map(|t| StagnationMonitor::new(t, start));
    let mut total = ExactSum::new();
    let mut transitions = Vec::new();
    let end = loop {
        if trace.len() as u64 > limits.max_moves {
            break EndReason::MoveCap;
        }
        let action = agent.act(&obs)?;
        let step = env.step(action)?;
        let next = Arc::new(step.obs);
        total.add(step.reward);
        trace.push(clamp_distance(step.distance, limits));
        let t = Transition {
            obs: obs.clone(),
            action,
            reward: step.reward,
            next_obs: next.clone(),
            done: step.done,
        };
        agent.observe(&t)?;
        transitions.push(t);
        obs = next;
        if step.done {
            break if step.died { EndReason::Pit } else { EndReason::Goal };
        }
        if limits.max_distance.is_some_and(|m| step.distance >= m) {
            break EndReason::DistanceCap;
        }
        if monitor.as_mut().is_some_and(|m| m.observe(step.distance)) {
            break EndReason::Stagnation;
        }
    };
    Ok(Episode {
        transitions,
        total_reward: total.value(),
        trace,
        end,
    })
}

fn clamp_distance(d: i64, limits: &EpisodeLimits) -> i64 {
    limits.max_distance.map_or(d, |m| d.min(m))
}
