use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fxrl_core::accel_sim::{
    compute_ips, ips_per_watt, memory_footprint, schedule_inference, schedule_timestep, schedule_training, CycleReport,
};
use fxrl_core::checkpoint::Checkpoint;
use fxrl_core::ddpg::{evaluate_policy, run_training_with, Agent};
use fxrl_core::env::{make_env, write_trace, TraceRow};
use fxrl_core::fixnum::Fx32;
use fxrl_core::par::Exec;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const REWARDS_FILE: &str = "rewards.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CYCLE_REPORT_FILE: &str = "cycle_report.json";

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Serialize)]
struct Summary<'a> {
    final_eval_reward: Option<f64>,
    mode_switch_timestep: Option<u64>,
    wall_time_s: f64,
    updates: u64,
    config: &'a RunConfig,
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let spec = cfg.env_spec();
    let mut env = make_env(&cfg.env)?;
    let mut agent = Agent::new(spec.state_dim, spec.action_dim, &cfg.agent, cfg.train.seed)?.with_exec(cfg.exec);
    let start = Instant::now();
    let log = run_training_with(&mut agent, env.as_mut(), &cfg.train, |r| {
        if !quiet {
            eprintln!("t={:>8} eval={:>10.3} mode={}", r.timestep, r.eval_reward, r.precision);
        }
    })?;
    let wall = start.elapsed().as_secs_f64();

    let out = &cfg.output_dir;
    write_atomic(&out.join(REWARDS_FILE), log.to_csv().as_bytes())?;
    let ck = Checkpoint {
        env: cfg.env.clone(),
        timestep: cfg.train.total_timesteps,
        parts: agent.parts(),
    };
    write_atomic(&out.join(CHECKPOINT_FILE), &ck.to_bytes())?;
    let summary = Summary {
        final_eval_reward: log.final_reward(),
        mode_switch_timestep: log.mode_switch_timestep,
        wall_time_s: wall,
        updates: log.updates,
        config: cfg,
    };
    write_atomic(&out.join(SUMMARY_FILE), &json_bytes(&summary)?)?;
    if !quiet {
        match log.final_reward() {
            Some(r) => println!("final eval reward {r:.3}"),
            None => println!("no evaluation ran"),
        }
        match log.mode_switch_timestep {
            Some(t) => println!("switched to half16 at t={t}"),
            None => println!("stayed in full32"),
        }
        println!("artifacts in {}", out.display());
    }
    Ok(())
}

fn report_json(r: &CycleReport) -> serde_json::Value {
    json!({
        "cycles": r.cycles,
        "macs": r.macs,
        "utilization": r.utilization,
        "ips": r.ips,
        "samples": r.samples,
        "time_s": r.time_s,
    })
}

pub fn sim(cfg: &RunConfig, quiet: bool) -> Result<serde_json::Value> {
    let nets = cfg.sim_networks();
    let accel = &cfg.accel;
    let batch = cfg.train.batch_size;
    let training = schedule_training(&nets, batch, accel);
    let inference = schedule_inference(&nets[0], accel);
    let timestep = schedule_timestep(&training, &inference, accel.composition, accel.clock_hz);
    let platform_ips = compute_ips(&timestep, cfg.sim.host_latency_s);
    let memory = memory_footprint(&nets);
    let widths: Vec<Vec<usize>> = nets
        .iter()
        .map(|n| {
            let mut w: Vec<usize> = n.layers.first().map(|l| l.cols).into_iter().collect();
            w.extend(n.layers.iter().map(|l| l.rows));
            w
        })
        .collect();
    let report = json!({
        "cycles": training.cycles,
        "macs": training.macs,
        "utilization": training.utilization,
        "ips": training.ips,
        "config": {
            "env": cfg.env,
            "networks": widths,
            "batch_size": batch,
            "accel": accel,
            "host_latency_s": cfg.sim.host_latency_s,
            "watts": cfg.sim.watts,
        },
        "inference": report_json(&inference),
        "timestep": report_json(&timestep),
        "platform_ips": platform_ips,
        "ips_per_watt": ips_per_watt(platform_ips, cfg.sim.watts),
        "memory": memory,
    });
    write_atomic(&cfg.output_dir.join(CYCLE_REPORT_FILE), &json_bytes(&report)?)?;
    if !quiet {
        println!(
            "{:<22} {:>12} {:>14} {:>12} {:>14}",
            "schedule", "cycles", "macs", "util", "ips"
        );
        for (name, r) in [
            ("training (batch)", &training),
            ("actor inference", &inference),
            ("timestep", &timestep),
        ] {
            println!(
                "{:<22} {:>12} {:>14} {:>12.4} {:>14.1}",
                name, r.cycles, r.macs, r.utilization, r.ips
            );
        }
        println!(
            "platform ips {:.1} (host latency {} s)",
            platform_ips, cfg.sim.host_latency_s
        );
        println!(
            "memory: weights {} B, gradients {} B, activations {} B",
            memory.weight_bytes, memory.gradient_bytes, memory.activation_bytes
        );
    }
    Ok(report)
}

pub fn eval(checkpoint: &Path, episodes: usize, seed: u64, trace: Option<&PathBuf>) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let env = make_env(&ck.env)?;
    let actor = &ck.parts.actor;
    let mode = ck.parts.actor_qat.forward_mode();
    if actor.input_dim() != env.spec().state_dim || actor.output_dim() != env.spec().action_dim {
        bail!(
            "checkpoint actor {:?} does not fit environment {}",
            actor.widths(),
            ck.env
        );
    }
    let mean = evaluate_policy(env.as_ref(), actor, mode, episodes, seed, Exec::default())?;
    println!("mean reward over {episodes} episodes: {mean:.3}");
    if let Some(path) = trace {
        let mut e = env.fresh();
        let mut s = e.reset(seed);
        let mut rows = Vec::new();
        loop {
            let x: Vec<Fx32> = s.iter().map(|&v| Fx32::from_real(v)).collect();
            let (a, _) = actor.forward(&x, mode)?;
            let a: Vec<f64> = a.iter().map(|v| v.to_real()).collect();
            let step = e.step(&a);
            rows.push(TraceRow {
                t: rows.len(),
                state: s,
                action: a,
                reward: step.reward,
            });
            if step.done() {
                break;
            }
            s = step.observation;
        }
        let mut buf = Vec::new();
        write_trace(&mut buf, env.spec(), &rows)?;
        write_atomic(path, &buf)?;
    }
    Ok(mean)
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let h = ck.header();
    println!("format      v{} Q{}.{}", h.version, 32 - h.frac_bits, h.frac_bits);
    println!("env         {}", h.env);
    println!("timestep    {}", h.timestep);
    println!("actor       {:?}", h.actor_widths);
    println!("critic      {:?}", h.critic_widths);
    println!("precision   {}", h.precision);
    println!("quant       delay {} bits {}", h.quant_delay, h.quant_bits);
    println!("params      {}", h.param_count);
    println!("adam steps  {}", h.optimizer_steps);
    Ok(())
}
