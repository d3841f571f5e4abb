//! Exploration noise added to the actor output.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    OrnsteinUhlenbeck,
}

/// Per-step exploration noise. Every draw is seeded by the caller so a run
/// replays exactly; the OU variant also carries its own state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationNoise {
    kind: NoiseKind,
    sigma: f64,
    theta: f64,
    state: Vec<f64>,
}

impl ExplorationNoise {
    pub fn new(kind: NoiseKind, sigma: f64, theta: f64, dim: usize) -> Self {
        ExplorationNoise {
            kind,
            sigma,
            theta,
            state: vec![0.0; dim],
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn sample(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        match self.kind {
            NoiseKind::Gaussian => (0..self.state.len()).map(|_| self.sigma * rng.gaussian()).collect(),
            NoiseKind::OrnsteinUhlenbeck => {
                for x in self.state.iter_mut() {
                    *x += -self.theta * *x + self.sigma * rng.gaussian();
                }
                self.state.clone()
            }
        }
    }
}
