//! Deep deterministic policy gradient in Q16.16.
//!
//! One training step is: critic targets from the target networks, critic
//! regression, actor update through the freshly updated critic, then a soft
//! target update. Batch samples are processed independently and their
//! gradients summed exactly, so the execution policy never changes results.

mod noise;
mod replay;
mod train;

use serde::{Deserialize, Serialize};

pub use noise::{ExplorationNoise, NoiseKind};
pub use replay::{ReplayBuffer, Transition};
pub use train::{evaluate_policy, run_training, run_training_with, RewardLog, RewardRecord, TrainConfig};

use crate::env::Environment;
use crate::fixnum::{Fx32, Precision};
use crate::nn::{Activation, AdamConfig, AdamState, GradAccumulator, Network};
use crate::par::Exec;
use crate::qat::{QatController, RangeEnvelope};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Final-layer weights start in `[-FINAL_INIT, FINAL_INIT]`.
const FINAL_INIT: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Hidden widths shared by actor and critic.
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub noise: NoiseKind,
    pub noise_sigma: f64,
    pub ou_theta: f64,
    pub reward_scale: f64,
    pub quant_delay: u64,
    pub quant_bits: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![400, 300],
            gamma: 0.99,
            tau: 0.001,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            noise: NoiseKind::Gaussian,
            noise_sigma: 0.1,
            ou_theta: 0.15,
            reward_scale: 1.0,
            // 30% of the default training horizon.
            quant_delay: 300_000,
            quant_bits: 16,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) || !(self.actor_lr >= 0.0) || !(self.critic_lr >= 0.0) {
            return bad("noise_sigma and learning rates must be non-negative");
        }
        if self.quant_bits != 8 && self.quant_bits != 16 {
            return Err(Error::UnsupportedBits(self.quant_bits));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMetrics {
    /// Mean squared critic error.
    pub critic_loss: Fx32,
    pub mean_q: Fx32,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    gamma: Fx32,
    tau: Fx32,
    reward_scale: Fx32,
    actor: Network,
    critic: Network,
    actor_target: Network,
    critic_target: Network,
    actor_qat: QatController,
    critic_qat: QatController,
    actor_opt: AdamState,
    critic_opt: AdamState,
    noise: ExplorationNoise,
    exec: Exec,
}

/// Networks and optimizer state, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentParts {
    pub actor: Network,
    pub critic: Network,
    pub actor_target: Network,
    pub critic_target: Network,
    pub actor_qat: QatController,
    pub critic_qat: QatController,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

struct CriticAcc {
    grads: GradAccumulator,
    sq_err: i128,
    q_sum: i64,
    ranges: RangeEnvelope,
}

struct ActorAcc {
    grads: GradAccumulator,
    actor_ranges: RangeEnvelope,
    critic_ranges: RangeEnvelope,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

fn concat(a: &[Fx32], b: &[Fx32]) -> Vec<Fx32> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl Agent {
    pub fn new(state_dim: usize, action_dim: usize, config: &AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, 0);
        let mut actor = Network::mlp(
            &widths(state_dim, &config.hidden, action_dim),
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        );
        let mut critic = Network::mlp(
            &widths(state_dim + action_dim, &config.hidden, 1),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        for net in [&mut actor, &mut critic] {
            if let Some(last) = net.layers_mut().last_mut() {
                for w in last.weights_mut() {
                    *w = Fx32::from_real(rng.uniform(-FINAL_INIT, FINAL_INIT));
                }
                for b in last.bias_mut() {
                    *b = Fx32::from_real(rng.uniform(-FINAL_INIT, FINAL_INIT));
                }
            }
        }
        let parts = AgentParts {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_qat: QatController::new(actor.layers().len(), config.quant_delay, config.quant_bits),
            critic_qat: QatController::new(critic.layers().len(), config.quant_delay, config.quant_bits),
            actor_opt: AdamState::for_network(AdamConfig::with_lr(config.actor_lr), &actor),
            critic_opt: AdamState::for_network(AdamConfig::with_lr(config.critic_lr), &critic),
            actor,
            critic,
        };
        Self::from_parts(config, parts)
    }

    /// Reassembles an agent; shapes must agree with `config`.
    pub fn from_parts(config: &AgentConfig, parts: AgentParts) -> Result<Self> {
        config.validate()?;
        let state_dim = parts.actor.input_dim();
        let action_dim = parts.actor.output_dim();
        let mismatch = |context, expected, found| Error::ShapeMismatch {
            context,
            expected,
            found,
        };
        if parts.critic.input_dim() != state_dim + action_dim {
            return Err(mismatch(
                "critic input",
                state_dim + action_dim,
                parts.critic.input_dim(),
            ));
        }
        if parts.critic.output_dim() != 1 {
            return Err(mismatch("critic output", 1, parts.critic.output_dim()));
        }
        if !parts.actor.same_shape(&parts.actor_target) || !parts.critic.same_shape(&parts.critic_target) {
            return Err(mismatch(
                "target network",
                parts.actor.param_count(),
                parts.actor_target.param_count(),
            ));
        }
        Ok(Agent {
            config: config.clone(),
            state_dim,
            action_dim,
            gamma: Fx32::from_real(config.gamma),
            tau: Fx32::from_real(config.tau),
            reward_scale: Fx32::from_real(config.reward_scale),
            noise: ExplorationNoise::new(config.noise, config.noise_sigma, config.ou_theta, action_dim),
            exec: Exec::default(),
            actor: parts.actor,
            critic: parts.critic,
            actor_target: parts.actor_target,
            critic_target: parts.critic_target,
            actor_qat: parts.actor_qat,
            critic_qat: parts.critic_qat,
            actor_opt: parts.actor_opt,
            critic_opt: parts.critic_opt,
        })
    }

    pub fn parts(&self) -> AgentParts {
        AgentParts {
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            actor_target: self.actor_target.clone(),
            critic_target: self.critic_target.clone(),
            actor_qat: self.actor_qat.clone(),
            critic_qat: self.critic_qat.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opt: self.critic_opt.clone(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn actor(&self) -> &Network {
        &self.actor
    }

    pub fn critic(&self) -> &Network {
        &self.critic
    }

    pub fn actor_target(&self) -> &Network {
        &self.actor_target
    }

    pub fn critic_target(&self) -> &Network {
        &self.critic_target
    }

    pub fn actor_mut(&mut self) -> &mut Network {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut Network {
        &mut self.critic
    }

    pub fn actor_qat(&self) -> &QatController {
        &self.actor_qat
    }

    pub fn critic_qat(&self) -> &QatController {
        &self.critic_qat
    }

    pub fn precision(&self) -> Precision {
        self.actor_qat.mode()
    }

    /// Advances both quantization controllers. Either both switch or
    /// neither does.
    pub fn tick(&mut self) -> Result<Precision> {
        let mut a = self.actor_qat.clone();
        let mut c = self.critic_qat.clone();
        a.tick()?;
        c.tick()?;
        self.actor_qat = a;
        self.critic_qat = c;
        Ok(self.precision())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::ShapeMismatch {
                context: "state",
                expected: self.state_dim,
                found: state.len(),
            });
        }
        Ok(())
    }

    /// Noise-free actor output.
    pub fn policy(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let s: Vec<Fx32> = state.iter().map(|&x| Fx32::from_real(x)).collect();
        let (a, _) = self.actor.forward(&s, self.actor_qat.forward_mode())?;
        Ok(a.iter().map(|x| x.to_real()).collect())
    }

    /// `clamp(pi(s) + noise, -1, 1)`. The forward pass feeds the actor's
    /// range envelope while still in full precision.
    pub fn select_action(&mut self, state: &[f64], noise_seed: u64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let s: Vec<Fx32> = state.iter().map(|&x| Fx32::from_real(x)).collect();
        let (a, tape) = self.actor.forward(&s, self.actor_qat.forward_mode())?;
        self.actor_qat.observe_if_full(&tape)?;
        let noise = self.noise.sample(noise_seed);
        Ok(a.iter()
            .zip(noise)
            .map(|(a, n)| (a.to_real() + n).clamp(-1.0, 1.0))
            .collect())
    }

    pub fn reset_noise(&mut self) {
        self.noise.reset();
    }

    /// Feeds the critic's envelope with one state-action pair.
    pub fn observe_critic(&mut self, state: &[f64], action: &[f64]) -> Result<()> {
        self.check_state(state)?;
        let x: Vec<Fx32> = state.iter().chain(action).map(|&x| Fx32::from_real(x)).collect();
        let (_, tape) = self.critic.forward(&x, self.critic_qat.forward_mode())?;
        self.critic_qat.observe_if_full(&tape)
    }

    /// `y = scale * r + gamma * (1 - done) * Q'(s', pi'(s'))`, from target
    /// networks only.
    pub fn critic_targets(&self, batch: &[Transition]) -> Result<Vec<Fx32>> {
        let amode = self.actor_qat.forward_mode();
        let cmode = self.critic_qat.forward_mode();
        self.exec
            .map(batch, |t| {
                let r = self.reward_scale * t.reward;
                if t.done {
                    return Ok(r);
                }
                let (a, _) = self.actor_target.forward(&t.next_state, amode)?;
                let (q, _) = self.critic_target.forward(&concat(&t.next_state, &a), cmode)?;
                Ok(r.saturating_add(self.gamma * q[0]))
            })
            .into_iter()
            .collect()
    }

    pub fn train_step(&mut self, batch: &[Transition]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for t in batch {
            if t.state.len() != self.state_dim
                || t.next_state.len() != self.state_dim
                || t.action.len() != self.action_dim
            {
                return Err(Error::ShapeMismatch {
                    context: "transition",
                    expected: self.state_dim,
                    found: t.state.len(),
                });
            }
        }
        let targets = self.critic_targets(batch)?;
        let indexed: Vec<(&Transition, Fx32)> = batch.iter().zip(targets).collect();

        // Critic regression.
        let critic = &self.critic;
        let cmode = self.critic_qat.forward_mode();
        let cdepth = critic.layers().len();
        let acc = self.exec.fold_reduce(
            &indexed,
            || {
                Ok(CriticAcc {
                    grads: GradAccumulator::new(critic),
                    sq_err: 0,
                    q_sum: 0,
                    ranges: RangeEnvelope::new(cdepth),
                })
            },
            |acc: Result<CriticAcc>, (t, y)| {
                let mut acc = acc?;
                let (q, tape) = critic.forward(&concat(&t.state, &t.action), cmode)?;
                let e = q[0].saturating_sub(*y);
                critic.backprop(&tape, &[e], Some(&mut acc.grads))?;
                acc.sq_err += e.raw() as i128 * e.raw() as i128;
                acc.q_sum += q[0].raw() as i64;
                acc.ranges.add_tape(&tape);
                Ok(acc)
            },
            |a, b| {
                let (a, b) = (a?, b?);
                Ok(CriticAcc {
                    grads: a.grads.merge(b.grads),
                    sq_err: a.sq_err + b.sq_err,
                    q_sum: a.q_sum + b.q_sum,
                    ranges: a.ranges.merge(b.ranges),
                })
            },
        )?;
        let n = batch.len() as i128;
        let metrics = StepMetrics {
            critic_loss: Fx32::saturate_i128((acc.sq_err >> 16) / n),
            mean_q: Fx32::saturate_i128(acc.q_sum as i128 / n),
        };
        let critic_full = self.critic_qat.mode() == Precision::Full32;
        if critic_full {
            self.critic_qat.observe_envelope(&acc.ranges)?;
        }
        self.critic_opt.step(&mut self.critic, &acc.grads.finish())?;

        // Policy gradient through the updated critic.
        let (actor, critic) = (&self.actor, &self.critic);
        let amode = self.actor_qat.forward_mode();
        let cmode = self.critic_qat.forward_mode();
        let (adepth, sdim) = (actor.layers().len(), self.state_dim);
        let acc = self.exec.fold_reduce(
            batch,
            || {
                Ok(ActorAcc {
                    grads: GradAccumulator::new(actor),
                    actor_ranges: RangeEnvelope::new(adepth),
                    critic_ranges: RangeEnvelope::new(cdepth),
                })
            },
            |acc: Result<ActorAcc>, t| {
                let mut acc = acc?;
                let (a, atape) = actor.forward(&t.state, amode)?;
                let (_, ctape) = critic.forward(&concat(&t.state, &a), cmode)?;
                let d_in = critic.backprop(&ctape, &[-Fx32::ONE], None)?;
                actor.backprop(&atape, &d_in[sdim..], Some(&mut acc.grads))?;
                acc.actor_ranges.add_tape(&atape);
                acc.critic_ranges.add_tape(&ctape);
                Ok(acc)
            },
            |a, b| {
                let (a, b) = (a?, b?);
                Ok(ActorAcc {
                    grads: a.grads.merge(b.grads),
                    actor_ranges: a.actor_ranges.merge(b.actor_ranges),
                    critic_ranges: a.critic_ranges.merge(b.critic_ranges),
                })
            },
        )?;
        if self.actor_qat.mode() == Precision::Full32 {
            self.actor_qat.observe_envelope(&acc.actor_ranges)?;
        }
        if critic_full {
            self.critic_qat.observe_envelope(&acc.critic_ranges)?;
        }
        self.actor_opt.step(&mut self.actor, &acc.grads.finish())?;

        self.actor_target.soft_update_from(&self.actor, self.tau);
        self.critic_target.soft_update_from(&self.critic, self.tau);
        Ok(metrics)
    }

    /// Mean noise-free return over `episodes` seeded episodes.
    pub fn evaluate(&self, env: &dyn Environment, episodes: usize, seed: u64) -> Result<f64> {
        evaluate_policy(
            env,
            &self.actor,
            self.actor_qat.forward_mode(),
            episodes,
            seed,
            self.exec,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LqBandit;

    fn cfg() -> AgentConfig {
        AgentConfig {
            hidden: vec![16, 16],
            ..AgentConfig::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let a = [rng.uniform(-1.0, 1.0)];
                let s2: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
                Transition::from_real(&s, &a, rng.uniform(-2.0, 0.0), &s2, rng.below(4) == 0)
            })
            .collect()
    }

    #[test]
    fn zero_actor_without_noise_acts_zero() {
        let mut c = cfg();
        c.noise_sigma = 0.0;
        let mut agent = Agent::new(3, 1, &c, 1).unwrap();
        for l in agent.actor_mut().layers_mut() {
            l.weights_mut().fill(Fx32::ZERO);
            l.bias_mut().fill(Fx32::ZERO);
        }
        assert_eq!(agent.select_action(&[0.3, -0.2, 1.0], 7).unwrap(), vec![0.0]);
        assert!(matches!(
            agent.select_action(&[0.3], 7),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn same_noise_seed_same_action() {
        let mut a = Agent::new(3, 1, &cfg(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(
            a.select_action(&[0.1, 0.2, 0.3], 42).unwrap(),
            b.select_action(&[0.1, 0.2, 0.3], 42).unwrap()
        );
    }

    #[test]
    fn noise_std_matches_sigma() {
        let mut agent = Agent::new(1, 1, &cfg(), 3).unwrap();
        for l in agent.actor_mut().layers_mut() {
            l.weights_mut().fill(Fx32::ZERO);
            l.bias_mut().fill(Fx32::ZERO);
        }
        let n = 100_000u64;
        let xs: Vec<f64> = (0..n).map(|k| agent.select_action(&[0.5], k).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn terminal_discount_free_target_is_reward() {
        let mut c = cfg();
        c.gamma = 1.0;
        let agent = Agent::new(3, 1, &c, 2).unwrap();
        let mut b = batch(8, 5);
        for t in b.iter_mut() {
            t.done = true;
        }
        let y = agent.critic_targets(&b).unwrap();
        assert_eq!(y, b.iter().map(|t| t.reward).collect::<Vec<_>>());
        let same = vec![b[0].clone(); 4];
        let y = agent.critic_targets(&same).unwrap();
        assert!(y.iter().all(|&v| v == y[0]));
    }

    #[test]
    fn targets_ignore_online_networks() {
        let agent = Agent::new(3, 1, &cfg(), 2).unwrap();
        let b = batch(8, 6);
        let y = agent.critic_targets(&b).unwrap();
        let mut other = agent.clone();
        other.actor_mut().layers_mut()[0].weights_mut().fill(Fx32::ONE);
        other.critic_mut().layers_mut()[0].weights_mut().fill(Fx32::ONE);
        assert_eq!(other.critic_targets(&b).unwrap(), y);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut agent = Agent::new(3, 1, &cfg(), 2).unwrap();
        assert!(matches!(agent.train_step(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn tau_extremes() {
        let b = batch(16, 8);
        let mut c = cfg();
        c.tau = 1.0;
        let mut agent = Agent::new(3, 1, &c, 4).unwrap();
        for _ in 0..3 {
            agent.train_step(&b).unwrap();
            assert_eq!(agent.actor_target(), agent.actor());
            assert_eq!(agent.critic_target(), agent.critic());
        }
        c.tau = 0.0;
        let mut agent = Agent::new(3, 1, &c, 4).unwrap();
        let (a0, c0) = (agent.actor_target().clone(), agent.critic_target().clone());
        for _ in 0..3 {
            agent.train_step(&b).unwrap();
        }
        assert_eq!(agent.actor_target(), &a0);
        assert_eq!(agent.critic_target(), &c0);
        assert_ne!(agent.actor(), &a0);
    }

    #[test]
    fn execution_policy_does_not_change_results() {
        let b = batch(33, 9);
        let mut seq = Agent::new(3, 1, &cfg(), 5).unwrap().with_exec(Exec::Sequential);
        let mut par = seq.clone().with_exec(Exec::Parallel);
        for _ in 0..4 {
            assert_eq!(seq.train_step(&b).unwrap(), par.train_step(&b).unwrap());
        }
        assert_eq!(seq.parts(), par.parts());
    }

    #[test]
    fn bandit_greedy_action_converges() {
        let c = AgentConfig {
            hidden: vec![32, 32],
            gamma: 0.5,
            tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            noise_sigma: 0.3,
            ..AgentConfig::default()
        };
        let mut agent = Agent::new(1, 1, &c, 11).unwrap();
        let mut env = LqBandit::new();
        let mut buf = ReplayBuffer::new(10_000, 3);
        let probes = [-0.8, -0.3, 0.4, 0.9];
        let err = |agent: &Agent| -> f64 {
            probes
                .iter()
                .map(|&s| (agent.policy(&[s]).unwrap()[0] - LqBandit::optimal_action(s)).abs())
                .fold(0.0, f64::max)
        };
        let mut errs = vec![err(&agent)];
        for t in 0..2000u64 {
            if buf.len() >= 64 {
                let b = buf.sample(64).unwrap();
                agent.train_step(&b).unwrap();
            }
            let s = env.reset(t);
            let a = agent.select_action(&s, 1_000_000 + t).unwrap();
            let st = env.step(&a);
            buf.push(Transition::from_real(&s, &a, st.reward, &st.observation, true));
            if (t + 1) % 500 == 0 {
                errs.push(err(&agent));
            }
        }
        let last = *errs.last().unwrap();
        assert!(last < 0.1, "errors {errs:?}");
        assert!(errs[0] > 0.3 && errs[1] < errs[0], "errors {errs:?}");
    }
}
