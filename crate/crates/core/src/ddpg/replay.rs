//! Host-side experience replay.

use crate::fixnum::Fx32;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// One environment transition, converted to Q16.16 at the host boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub state: Vec<Fx32>,
    pub action: Vec<Fx32>,
    pub reward: Fx32,
    pub next_state: Vec<Fx32>,
    /// True only for absorbing ends; time-limit cuts still bootstrap.
    pub done: bool,
}

impl Transition {
    pub fn from_real(state: &[f64], action: &[f64], reward: f64, next_state: &[f64], done: bool) -> Self {
        let conv = |v: &[f64]| v.iter().map(|&x| Fx32::from_real(x)).collect();
        Transition {
            state: conv(state),
            action: conv(action),
            reward: Fx32::from_real(reward),
            next_state: conv(next_state),
            done,
        }
    }
}

/// Fixed-capacity ring buffer with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: SplitMix64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            next: 0,
            rng: SplitMix64::new(seed),
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Draws `min(n, len)` transitions uniformly with replacement.
    pub fn sample(&mut self, n: usize) -> Result<Vec<Transition>> {
        if self.items.is_empty() || n == 0 {
            return Err(Error::EmptyBatch);
        }
        let len = self.items.len() as u64;
        Ok((0..n.min(self.items.len()))
            .map(|_| self.items[self.rng.below(len) as usize].clone())
            .collect())
    }
}
