//! Training loop, evaluation and the reward log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Agent, Transition};
use crate::env::Environment;
use crate::fixnum::Precision;
use crate::nn::{ForwardMode, Network};
use crate::par::Exec;
use crate::rng::SplitMix64;
use crate::{Error, Result};

use super::ReplayBuffer;

// Seed streams derived from the run seed.
const STREAM_RESET: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_CALIBRATION: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_timesteps: u64,
    pub batch_size: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    pub replay_capacity: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Random-policy steps used to seed activation ranges when the
    /// quantization delay is 0 or 1.
    pub calibration_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_timesteps: 1_000_000,
            batch_size: 64,
            warmup: 1000,
            replay_capacity: 100_000,
            eval_every: 5000,
            eval_episodes: 10,
            calibration_steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.total_timesteps == 0 {
            return bad("total_timesteps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be at least 1");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub timestep: u64,
    pub eval_reward: f64,
    pub precision: Precision,
    /// Loss of the most recent update; `None` before training starts.
    pub critic_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardLog {
    pub records: Vec<RewardRecord>,
    pub mode_switch_timestep: Option<u64>,
    pub updates: u64,
}

impl RewardLog {
    pub const CSV_HEADER: &'static str = "timestep,eval_reward,precision_mode,critic_loss";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let loss = r.critic_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
            writeln!(out, "{},{:.6},{},{}", r.timestep, r.eval_reward, r.precision, loss)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_reward)
    }

    /// Best evaluation with `lo < timestep <= hi`.
    pub fn best_between(&self, lo: u64, hi: u64) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.timestep > lo && r.timestep <= hi)
            .map(|r| r.eval_reward)
            .max_by(f64::total_cmp)
    }
}

/// Mean undiscounted return of `episodes` noise-free episodes. Episode `k`
/// starts from `reset(derive(seed, k))`, so results are reproducible and
/// independent of the execution policy.
pub fn evaluate_policy(
    env: &dyn Environment,
    actor: &Network,
    mode: ForwardMode<'_>,
    episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let returns = exec.map_range(episodes, |k| -> Result<f64> {
        let mut e = env.fresh();
        let mut s = e.reset(SplitMix64::derive(seed, k as u64).next_u64());
        let mut total = 0.0;
        loop {
            let x: Vec<_> = s.iter().map(|&v| crate::fixnum::Fx32::from_real(v)).collect();
            let (a, _) = actor.forward(&x, mode)?;
            let a: Vec<f64> = a.iter().map(|v| v.to_real()).collect();
            let step = e.step(&a);
            total += step.reward;
            if step.done() {
                return Ok(total);
            }
            s = step.observation;
        }
    });
    let mut sum = 0.0;
    for r in returns {
        sum += r?;
    }
    Ok(sum / episodes as f64)
}

pub fn run_training(agent: &mut Agent, env: &mut dyn Environment, cfg: &TrainConfig) -> Result<RewardLog> {
    run_training_with(agent, env, cfg, |_| {})
}

/// Runs `cfg.total_timesteps` environment steps. Each step ticks the
/// quantization controllers, trains once the buffer holds `warmup`
/// transitions, acts with exploration noise and stores the transition.
/// `on_eval` sees every evaluation record as it is produced.
pub fn run_training_with<F: FnMut(&RewardRecord)>(
    agent: &mut Agent,
    env: &mut dyn Environment,
    cfg: &TrainConfig,
    mut on_eval: F,
) -> Result<RewardLog> {
    cfg.validate()?;
    let spec = env.spec().clone();
    if spec.state_dim != agent.state_dim() || spec.action_dim != agent.action_dim() {
        return Err(Error::ShapeMismatch {
            context: "environment",
            expected: agent.state_dim(),
            found: spec.state_dim,
        });
    }
    if agent.actor_qat().delay() <= 1 && agent.precision() == Precision::Full32 {
        calibrate(
            agent,
            env,
            cfg.calibration_steps,
            SplitMix64::derive(cfg.seed, STREAM_CALIBRATION).next_u64(),
        )?;
    }

    let mut replay = ReplayBuffer::new(
        cfg.replay_capacity,
        SplitMix64::derive(cfg.seed, STREAM_REPLAY).next_u64(),
    );
    let mut resets = SplitMix64::derive(cfg.seed, STREAM_RESET);
    let noise_base = SplitMix64::derive(cfg.seed, STREAM_NOISE).next_u64();
    let eval_seed = SplitMix64::derive(cfg.seed, STREAM_EVAL).next_u64();
    let eval_env = env.fresh();
    let warmup = cfg.warmup.max(1);

    let mut log = RewardLog::default();
    let mut last_loss = None;
    let mut state = env.reset(resets.next_u64());
    agent.reset_noise();
    for t in 1..=cfg.total_timesteps {
        let before = agent.precision();
        if agent.tick()? != before {
            log.mode_switch_timestep = Some(t);
        }
        if replay.len() >= warmup {
            let batch = replay.sample(cfg.batch_size)?;
            let m = agent.train_step(&batch)?;
            last_loss = Some(m.critic_loss.to_real());
            log.updates += 1;
        }
        let action = agent.select_action(&state, noise_base.wrapping_add(t))?;
        let step = env.step(&action);
        replay.push(Transition::from_real(
            &state,
            &action,
            step.reward,
            &step.observation,
            step.terminated,
        ));
        state = if step.done() {
            agent.reset_noise();
            env.reset(resets.next_u64())
        } else {
            step.observation
        };
        if t % cfg.eval_every == 0 {
            let record = RewardRecord {
                timestep: t,
                eval_reward: agent.evaluate(eval_env.as_ref(), cfg.eval_episodes, eval_seed)?,
                precision: agent.precision(),
                critic_loss: last_loss,
            };
            on_eval(&record);
            log.records.push(record);
        }
    }
    Ok(log)
}

/// Rolls out the untrained policy with noise so both networks see
/// representative inputs before an immediate precision switch.
fn calibrate(agent: &mut Agent, env: &mut dyn Environment, steps: usize, seed: u64) -> Result<()> {
    let mut rng = SplitMix64::new(seed);
    let mut e = env.fresh();
    let mut s = e.reset(rng.next_u64());
    for _ in 0..steps {
        let a = agent.select_action(&s, rng.next_u64())?;
        agent.observe_critic(&s, &a)?;
        let step = e.step(&a);
        s = if step.done() {
            e.reset(rng.next_u64())
        } else {
            step.observation
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddpg::AgentConfig;
    use crate::env::{EnvSpec, Pendulum, Step};

    fn small() -> AgentConfig {
        AgentConfig {
            hidden: vec![16, 16],
            ..AgentConfig::default()
        }
    }

    struct Silent {
        spec: EnvSpec,
        n: usize,
    }

    impl Environment for Silent {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn reset(&mut self, _: u64) -> Vec<f64> {
            self.n = 0;
            vec![0.5; self.spec.state_dim]
        }
        fn step(&mut self, _: &[f64]) -> Step {
            self.n += 1;
            Step {
                observation: vec![0.5; self.spec.state_dim],
                reward: 0.0,
                terminated: false,
                truncated: self.n >= self.spec.max_episode_steps,
            }
        }
        fn step_count(&self) -> usize {
            self.n
        }
        fn fresh(&self) -> Box<dyn Environment> {
            Box::new(Silent {
                spec: self.spec.clone(),
                n: 0,
            })
        }
    }

    #[test]
    fn zero_reward_env_evaluates_to_zero() {
        let mut spec = crate::env::env_spec("pendulum").unwrap();
        spec.max_episode_steps = 7;
        let env = Silent { spec, n: 0 };
        let agent = Agent::new(3, 1, &small(), 1).unwrap();
        assert_eq!(agent.evaluate(&env, 10, 3).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let env = Pendulum::new();
        let agent = Agent::new(3, 1, &small(), 2).unwrap();
        let a = agent.evaluate(&env, 10, 99).unwrap();
        assert_eq!(a, agent.evaluate(&env, 10, 99).unwrap());
        assert_eq!(
            a,
            evaluate_policy(
                &env,
                agent.actor(),
                agent.actor_qat().forward_mode(),
                10,
                99,
                Exec::Sequential
            )
            .unwrap()
        );
        assert!(a <= 0.0 && a >= 200.0 * Pendulum::min_reward(), "{a}");
    }

    #[test]
    fn single_step_run_only_warms_up() {
        let mut env = Pendulum::new();
        let mut agent = Agent::new(3, 1, &small(), 3).unwrap();
        let cfg = TrainConfig {
            total_timesteps: 1,
            eval_every: 1,
            eval_episodes: 1,
            ..TrainConfig::default()
        };
        let log = run_training(&mut agent, &mut env, &cfg).unwrap();
        assert_eq!(log.updates, 0);
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].critic_loss, None);
        assert!(log.to_csv().ends_with(",full32,\n"));
    }

    #[test]
    fn eval_every_total_gives_one_record_and_switch_is_logged() {
        let mut env = Pendulum::new();
        let mut c = small();
        c.quant_delay = 150;
        let mut agent = Agent::new(3, 1, &c, 4).unwrap();
        let cfg = TrainConfig {
            total_timesteps: 300,
            batch_size: 16,
            warmup: 100,
            eval_every: 300,
            eval_episodes: 2,
            ..TrainConfig::default()
        };
        let log = run_training(&mut agent, &mut env, &cfg).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].timestep, 300);
        assert_eq!(log.mode_switch_timestep, Some(150));
        assert_eq!(log.records[0].precision, Precision::Half16);
        assert_eq!(log.updates, 200);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = TrainConfig {
            total_timesteps: 400,
            batch_size: 8,
            warmup: 50,
            eval_every: 200,
            eval_episodes: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let mut c = small();
        c.quant_delay = 0;
        let run = |exec| {
            let mut agent = Agent::new(3, 1, &c, 17).unwrap().with_exec(exec);
            let log = run_training(&mut agent, &mut Pendulum::new(), &cfg).unwrap();
            (log, agent.parts())
        };
        let (a, pa) = run(Exec::Parallel);
        let (b, pb) = run(Exec::Sequential);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.mode_switch_timestep, Some(1));
    }
}
