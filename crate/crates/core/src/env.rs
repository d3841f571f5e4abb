//! Small continuous-control tasks and the environment registry.
//!
//! `pendulum`, `pointmass2d` and `lqbandit` are simulated. The MuJoCo task
//! names are registered with their state/action widths only so that memory
//! and cycle models can be evaluated on those shapes.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Agent-side action bounds; environments rescale internally.
    pub action_low: f64,
    pub action_high: f64,
    pub max_episode_steps: usize,
    /// False for entries that only carry dimensions.
    pub simulated: bool,
}

impl EnvSpec {
    fn new(name: &str, state_dim: usize, action_dim: usize, max_episode_steps: usize, simulated: bool) -> Self {
        EnvSpec {
            name: name.to_string(),
            state_dim,
            action_dim,
            action_low: -1.0,
            action_high: 1.0,
            max_episode_steps,
            simulated,
        }
    }
}

pub fn registry() -> Vec<EnvSpec> {
    vec![
        EnvSpec::new("pendulum", 3, 1, 200, true),
        EnvSpec::new("pointmass2d", 4, 2, 200, true),
        EnvSpec::new("lqbandit", 1, 1, 1, true),
        EnvSpec::new("halfcheetah", 17, 6, 1000, false),
        // Registered as 11/6 for footprint modeling, although the usual Hopper has 3 actions.
        EnvSpec::new("hopper", 11, 6, 1000, false),
        EnvSpec::new("swimmer", 8, 2, 1000, false),
    ]
}

pub fn env_spec(name: &str) -> Result<EnvSpec> {
    registry()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownEnv(name.to_string()))
}

pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "pointmass2d" => Ok(Box::new(PointMass2d::new())),
        "lqbandit" => Ok(Box::new(LqBandit::new())),
        other => {
            let spec = env_spec(other)?;
            Err(Error::ShapeOnlyEnv(spec.name))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Absorbing end of the episode (a fall); no bootstrapping past it.
    pub terminated: bool,
    /// Time limit reached.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Reinitializes from the seeded initial-state distribution.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Actions outside the spec bounds are clamped.
    fn step(&mut self, action: &[f64]) -> Step;

    fn step_count(&self) -> usize;

    /// A new, unreset instance of the same environment.
    fn fresh(&self) -> Box<dyn Environment>;
}

fn clamp_action(spec: &EnvSpec, a: f64) -> f64 {
    if a.is_nan() {
        0.0
    } else {
        a.clamp(spec.action_low, spec.action_high)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum with `theta = 0` upright.
///
/// `theta'' = 3g/(2l) sin(theta) + 3/(m l^2) u`, integrated with
/// semi-implicit Euler over 20 substeps per 0.05 s control step. Reward is
/// `-(theta^2 + 0.1 theta'^2 + 0.001 u^2)` on the pre-step state.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    rng: SplitMix64,
}

impl Pendulum {
    pub const DT: f64 = 0.05;
    pub const SUBSTEPS: usize = 20;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    const GRAVITY: f64 = 10.0;
    const LENGTH: f64 = 1.0;
    const MASS: f64 = 1.0;

    pub fn new() -> Self {
        Pendulum {
            spec: env_spec("pendulum").expect("registered"),
            theta: PI,
            theta_dot: 0.0,
            steps: 0,
            rng: SplitMix64::new(0),
        }
    }

    fn stiffness() -> f64 {
        3.0 * Self::GRAVITY / (2.0 * Self::LENGTH)
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    /// Mechanical energy per unit inertia, zero when hanging at rest.
    pub fn energy(&self) -> f64 {
        0.5 * self.theta_dot * self.theta_dot + Self::stiffness() * (1.0 + self.theta.cos())
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Worst possible per-step reward.
    pub fn min_reward() -> f64 {
        -(PI * PI + 0.1 * Self::MAX_SPEED * Self::MAX_SPEED + 0.001 * Self::MAX_TORQUE * Self::MAX_TORQUE)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = SplitMix64::new(seed);
        self.theta = self.rng.uniform(-PI, PI);
        self.theta_dot = self.rng.uniform(-1.0, 1.0);
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let u = clamp_action(&self.spec, action.first().copied().unwrap_or(0.0)) * Self::MAX_TORQUE;
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let h = Self::DT / Self::SUBSTEPS as f64;
        let drive = 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u;
        for _ in 0..Self::SUBSTEPS {
            self.theta_dot += (Self::stiffness() * self.theta.sin() + drive) * h;
            self.theta_dot = self.theta_dot.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            self.theta += self.theta_dot * h;
        }
        self.theta = wrap_angle(self.theta);
        self.steps += 1;
        Step {
            observation: self.observation(),
            reward,
            terminated: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        }
    }

    fn step_count(&self) -> usize {
        self.steps
    }

    fn fresh(&self) -> Box<dyn Environment> {
        Box::new(Pendulum::new())
    }
}

/// Planar point mass pushed toward the origin; leaving the `[-2, 2]^2` box
/// ends the episode.
#[derive(Debug, Clone)]
pub struct PointMass2d {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
}

impl PointMass2d {
    pub const DT: f64 = 0.05;
    pub const BOUND: f64 = 2.0;

    pub fn new() -> Self {
        PointMass2d {
            spec: env_spec("pointmass2d").expect("registered"),
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
        }
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Default for PointMass2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMass2d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        self.pos = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        self.vel = [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)];
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let a = [
            clamp_action(&self.spec, action.first().copied().unwrap_or(0.0)),
            clamp_action(&self.spec, action.get(1).copied().unwrap_or(0.0)),
        ];
        let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
        let reward = -(sq(self.pos) + 0.1 * sq(self.vel) + 0.001 * sq(a));
        for ((v, p), a) in self.vel.iter_mut().zip(&mut self.pos).zip(a) {
            *v += a * Self::DT;
            *p += *v * Self::DT;
        }
        self.steps += 1;
        let fell = self.pos.iter().any(|p| p.abs() > Self::BOUND);
        Step {
            observation: self.observation(),
            reward,
            terminated: fell,
            truncated: !fell && self.steps >= self.spec.max_episode_steps,
        }
    }

    fn step_count(&self) -> usize {
        self.steps
    }

    fn fresh(&self) -> Box<dyn Environment> {
        Box::new(PointMass2d::new())
    }
}

/// One-step bandit with reward `-(a - 0.5 s)^2`, `s ~ U[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LqBandit {
    spec: EnvSpec,
    state: f64,
    steps: usize,
}

impl LqBandit {
    pub const GAIN: f64 = 0.5;

    pub fn new() -> Self {
        LqBandit {
            spec: env_spec("lqbandit").expect("registered"),
            state: 0.0,
            steps: 0,
        }
    }

    pub fn optimal_action(state: f64) -> f64 {
        Self::GAIN * state
    }
}

impl Default for LqBandit {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for LqBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.state = SplitMix64::new(seed).uniform(-1.0, 1.0);
        self.steps = 0;
        vec![self.state]
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let a = clamp_action(&self.spec, action.first().copied().unwrap_or(0.0));
        let gap = a - Self::optimal_action(self.state);
        self.steps += 1;
        Step {
            observation: vec![self.state],
            reward: -gap * gap,
            terminated: true,
            truncated: false,
        }
    }

    fn step_count(&self) -> usize {
        self.steps
    }

    fn fresh(&self) -> Box<dyn Environment> {
        Box::new(LqBandit::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Episode trace as CSV: `t,s0..,a0..,reward`.
pub fn write_trace<W: Write>(mut out: W, spec: &EnvSpec, rows: &[TraceRow]) -> std::io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..spec.state_dim).map(|i| format!("s{i}")));
    header.extend((0..spec.action_dim).map(|i| format!("a{i}")));
    header.push("reward".into());
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut fields = vec![r.t.to_string()];
        fields.extend(r.state.iter().chain(&r.action).map(|v| format!("{v:.6}")));
        fields.push(format!("{:.6}", r.reward));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
