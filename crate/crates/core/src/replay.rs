//! Fixed-capacity FIFO experience store.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::env::ObservationStack;

/// One `(obs, action, reward, next_obs, done)` record. Observations are shared
/// so consecutive tuples do not duplicate frames.
#[derive(Clone, Debug)]
pub struct ExperienceTuple {
    pub obs: Arc<ObservationStack>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Arc<ObservationStack>,
    /// Environment-terminal transition (death or goal), not a time-limit cut.
    pub done: bool,
    /// Discounted return from this step to the end of its episode.
    pub return_to_go: f64,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
    inserted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of pushes since creation.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends `item`, evicting the oldest entry when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.inserted += 1;
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// `m` uniform draws with replacement. Empty when the buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..m)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn fifo_keeps_latest(cap in 1usize..50, n in 0usize..200) {
            let mut b = ReplayBuffer::new(cap);
            for i in 0..cap + n {
                b.push(i);
            }
            let kept: Vec<usize> = b.iter().copied().collect();
            let expected: Vec<usize> = (n..n + cap).collect();
            prop_assert_eq!(kept, expected);
            prop_assert!(b.len() <= cap);
            prop_assert_eq!(b.inserted(), (cap + n) as u64);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(10);
        (0..7).for_each(|i| b.push(i));
        let s1: Vec<i32> = b.sample(20, &mut ChaCha8Rng::seed_from_u64(1)).into_iter().copied().collect();
        let s2: Vec<i32> = b.sample(20, &mut ChaCha8Rng::seed_from_u64(1)).into_iter().copied().collect();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|v| (0..7).contains(v)));
        assert!(ReplayBuffer::<i32>::new(3).sample(4, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
    }
}
