//! A small deterministic corridor MDP with one-hot observations.
//!
//! States `0..len`, start at 0, actions `0 = left` and `1 = right`. Entering
//! the last state pays `goal_reward` and ends the episode; every other
//! transition pays nothing. Moving left at state 0 stays put.

use super::render::ObservationStack;
use super::{EnvError, EnvFactory, EnvStep, Environment};
use crate::tensor::Tensor;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

#[derive(Clone, Debug)]
pub struct Corridor {
    len: usize,
    goal_reward: f64,
    state: usize,
    moves: u64,
    done: bool,
}

impl Corridor {
    pub fn new(len: usize, goal_reward: f64) -> Self {
        assert!(len >= 2, "corridor needs at least two states");
        Self {
            len,
            goal_reward,
            state: 0,
            moves: 0,
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn goal_reward(&self) -> f64 {
        self.goal_reward
    }

    /// Deterministic transition: `(next_state, reward, terminal)`.
    pub fn transition(&self, state: usize, action: usize) -> (usize, f64, bool) {
        let next = match action {
            LEFT => state.saturating_sub(1),
            _ => (state + 1).min(self.len - 1),
        };
        if next == self.len - 1 {
            (next, self.goal_reward, true)
        } else {
            (next, 0.0, false)
        }
    }

    pub fn observe(&self, state: usize) -> ObservationStack {
        let mut v = vec![0.0; self.len];
        v[state] = 1.0;
        ObservationStack::new(Tensor::new(vec![self.len, 1, 1], v).expect("one-hot"))
            .expect("rank 3")
    }

    /// Optimal action values by value iteration over the enumerated MDP.
    pub fn value_iteration(&self, gamma: f64, tol: f64) -> Vec<[f64; 2]> {
        let mut q = vec![[0.0f64; 2]; self.len];
        loop {
            let mut delta: f64 = 0.0;
            let v: Vec<f64> = q.iter().map(|r| r[0].max(r[1])).collect();
            for s in 0..self.len - 1 {
                for a in [LEFT, RIGHT] {
                    let (ns, r, term) = self.transition(s, a);
                    let target = if term { r } else { r + gamma * v[ns] };
                    delta = delta.max((target - q[s][a]).abs());
                    q[s][a] = target;
                }
            }
            if delta < tol {
                return q;
            }
        }
    }
}

impl Environment for Corridor {
    fn num_actions(&self) -> usize {
        2
    }

    fn observation_shape(&self) -> [usize; 3] {
        [self.len, 1, 1]
    }

    fn reset(&mut self) -> ObservationStack {
        self.state = 0;
        self.moves = 0;
        self.done = false;
        self.observe(0)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action > RIGHT {
            return Err(EnvError::InvalidAction(action));
        }
        let (next, reward, term) = self.transition(self.state, action);
        self.state = next;
        self.moves += 1;
        self.done = term;
        Ok(EnvStep {
            obs: self.observe(next),
            reward,
            done: term,
            died: false,
            distance: self.distance(),
            moves: self.moves,
        })
    }

    fn distance(&self) -> i64 {
        self.state as i64
    }
}

impl EnvFactory for Corridor {
    type Env = Corridor;

    fn num_tasks(&self) -> usize {
        1
    }

    fn make(&self, _task: usize) -> Corridor {
        Corridor::new(self.len, self.goal_reward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_walk_reaches_goal() {
        let mut c = Corridor::new(6, 1.0);
        c.reset();
        for k in 0..5 {
            let s = c.step(RIGHT).unwrap();
            assert_eq!(s.done, k == 4);
            assert_eq!(s.reward, if k == 4 { 1.0 } else { 0.0 });
        }
        assert!(c.step(RIGHT).is_err());
    }

    #[test]
    fn value_iteration_closed_form() {
        let c = Corridor::new(6, 1.0);
        let q = c.value_iteration(0.9, 1e-12);
        for s in 0..5 {
            let right = 0.9f64.powi(4 - s as i32);
            assert!((q[s][RIGHT] - right).abs() < 1e-10);
            let left = 0.9 * 0.9f64.powi(4 - s.saturating_sub(1) as i32);
            assert!((q[s][LEFT] - left).abs() < 1e-10);
        }
    }
}
