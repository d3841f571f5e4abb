//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fxrl_core::accel_sim::{
    memory_footprint, mvm_cycles, schedule_inference, schedule_timestep, schedule_training, simulate_mvm, AapConfig,
    Composition, MvmInput, NetDims,
};
use fxrl_core::ddpg::{run_training, Agent, AgentConfig, RewardLog, TrainConfig};
use fxrl_core::env::Pendulum;
use fxrl_core::fixnum::{pe_mac_full, Fx16, Fx32, Precision, Quantizer};
use fxrl_core::nn::{mvm, Activation, ForwardMode, Network};
use fxrl_core::rng::SplitMix64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cheetah() -> Vec<NetDims> {
    vec![
        NetDims::from_widths(&[17, 400, 300, 6]),
        NetDims::from_widths(&[23, 400, 300, 1]),
    ]
}

fn half(n: usize) -> AapConfig {
    AapConfig::default().with_cores(n).with_precision(Precision::Half16)
}

fn weight_memory() -> Outcome {
    let m = memory_footprint(&cheetah());
    let rel = (m.weight_bytes as f64 / 1.05e6 - 1.0).abs();
    outcome(
        m.weight_bytes == 1_038_028 && rel < 0.02,
        format!("{} bytes, {:.2}% from 1.05 MB", m.weight_bytes, rel * 100.0),
    )
}

fn activation_memory() -> Outcome {
    let m = memory_footprint(&cheetah());
    let rel = (m.activation_bytes as f64 / 2940.0 - 1.0).abs();
    outcome(
        rel < 0.05,
        format!("{} bytes, {:.2}% from 2.94 KB", m.activation_bytes, rel * 100.0),
    )
}

fn pe_datapath() -> Outcome {
    let mut rng = SplitMix64::new(0xACC3);
    let mut mismatches = 0u64;
    let n = 1_000_000;
    for i in 0..n {
        // Mix full-range raw values with a few extremes.
        let (a, w) = match i % 1000 {
            0 => (i32::MIN, i32::MIN),
            1 => (i32::MAX, i32::MIN),
            2 => (-1, i32::MAX),
            _ => (rng.next_u64() as i32, rng.next_u64() as i32),
        };
        let acc = (rng.next_u64() as i64) >> 2;
        let direct = acc + a as i64 * w as i64;
        if pe_mac_full(Fx32::from_raw(a), Fx32::from_raw(w), acc) != direct {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in {n} pairs"))
}

fn simulator_equivalence() -> Outcome {
    let mut rng = SplitMix64::new(0x51A4);
    let mut mismatches = 0;
    let instances = 1000;
    for k in 0..instances {
        let rows = 1 + rng.below(96) as usize;
        let cols = 1 + rng.below(96) as usize;
        let n = 1 + rng.below(4) as usize;
        let transposed = k % 2 == 1;
        let precision = if k % 4 < 2 {
            Precision::Full32
        } else {
            Precision::Half16
        };
        let w: Vec<Fx32> = (0..rows * cols)
            .map(|_| Fx32::from_real(rng.uniform(-2.0, 2.0)))
            .collect();
        let in_len = if transposed { rows } else { cols };
        let cfg = AapConfig::default().with_cores(n);
        let (got, expected) = match precision {
            Precision::Full32 => {
                let x: Vec<Fx32> = (0..in_len).map(|_| Fx32::from_real(rng.uniform(-4.0, 4.0))).collect();
                let (y, _) = simulate_mvm(&w, rows, cols, MvmInput::Full(&x), &cfg, transposed).unwrap();
                let r = if transposed {
                    mvm::mvm_t(&w, rows, cols, &x)
                } else {
                    mvm::mvm(&w, rows, cols, &x, None)
                };
                (y, r)
            }
            Precision::Half16 => {
                let lo = -rng.uniform(0.01, 8.0);
                let hi = rng.uniform(0.01, 8.0);
                let q = Quantizer::fit(lo, hi, 16).unwrap();
                let codes: Vec<Fx16> = (0..in_len).map(|_| q.quantize_real(rng.uniform(lo, hi))).collect();
                let input = MvmInput::Half {
                    codes: &codes,
                    quantizer: &q,
                };
                let (y, _) = simulate_mvm(&w, rows, cols, input, &cfg, transposed).unwrap();
                let r = if transposed {
                    mvm::mvm_t_half(&w, rows, cols, &codes, &q)
                } else {
                    mvm::mvm_half(&w, rows, cols, &codes, &q, None)
                };
                (y, r)
            }
        };
        if got != expected {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in {instances} instances"),
    )
}

fn dual_precision() -> Outcome {
    let mut ratios = Vec::new();
    for q in [64, 400, 1024] {
        let f = mvm_cycles(q, q, Precision::Full32, 1, false, 0) as f64;
        let h = mvm_cycles(q, q, Precision::Half16, 1, false, 0) as f64;
        ratios.push(h / f);
    }
    let pass = ratios.iter().all(|r| (0.50..=0.55).contains(r));
    outcome(
        pass,
        format!("half/full cycle ratios {ratios:.4?} for Q = 64, 400, 1024"),
    )
}

fn utilization() -> Outcome {
    let rep = schedule_training(&cheetah(), 512, &half(2));
    outcome(rep.utilization >= 0.90, format!("utilization {:.4}", rep.utilization))
}

fn ips_flatness() -> Outcome {
    let nets = cheetah();
    let cfg = half(2);
    let infer = schedule_inference(&nets[0], &cfg);
    let ips: Vec<f64> = [64, 128, 256, 512]
        .iter()
        .map(|&b| {
            schedule_timestep(
                &schedule_training(&nets, b, &cfg),
                &infer,
                Composition::Serial,
                cfg.clock_hz,
            )
            .ips
        })
        .collect();
    let (lo, hi) = ips.iter().fold((f64::MAX, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    let spread = (hi - lo) / hi;
    outcome(
        spread < 0.05,
        format!("IPS {ips:.0?} for B = 64..512, spread {:.3}%", spread * 100.0),
    )
}

fn forward_f64(net: &Network, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut off = 0;
    for l in net.layers() {
        let (r, c) = (l.rows(), l.cols());
        let (w, b) = params[off..off + r * c + r].split_at(r * c);
        off += r * c + r;
        x = (0..r)
            .map(|i| {
                let pre = b[i] + (0..c).map(|j| w[i * c + j] * x[j]).sum::<f64>();
                match l.activation() {
                    Activation::Relu => pre.max(0.0),
                    Activation::Tanh => pre.tanh(),
                    Activation::Identity => pre,
                }
            })
            .collect();
    }
    x
}

fn gradient_fidelity() -> Outcome {
    let (mut ok, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let mut rng = SplitMix64::new(0x6AAD + seed);
        let widths = [
            2 + rng.below(5) as usize,
            4 + rng.below(12) as usize,
            4 + rng.below(12) as usize,
            1 + rng.below(3) as usize,
        ];
        let net = Network::mlp(&widths, Activation::Relu, Activation::Identity, &mut rng);
        let x: Vec<Fx32> = (0..widths[0])
            .map(|_| Fx32::from_real(rng.uniform(-1.0, 1.0)))
            .collect();
        let coef: Vec<Fx32> = (0..widths[3])
            .map(|_| Fx32::from_real(rng.uniform(-1.0, 1.0)))
            .collect();
        let (_, tape) = net.forward(&x, ForwardMode::Full32).unwrap();
        let grads = net.backward(&tape, &coef).unwrap();

        let xr: Vec<f64> = x.iter().map(|v| v.to_real()).collect();
        let cr: Vec<f64> = coef.iter().map(|v| v.to_real()).collect();
        let params: Vec<f64> = net.params().map(|p| p.to_real()).collect();
        let loss = |p: &[f64]| -> f64 { forward_f64(&net, p, &xr).iter().zip(&cr).map(|(y, c)| y * c).sum() };
        let h = 1e-6;
        let mut off = 0;
        for (l, g) in net.layers().iter().zip(&grads.params.layers) {
            for (k, gw) in g.weights.iter().enumerate() {
                let mut p = params.clone();
                p[off + k] += h;
                let up = loss(&p);
                p[off + k] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                let err = (gw.to_real() - fd).abs();
                if err <= 4.0 / 65536.0 || err <= 1e-2 * fd.abs() {
                    ok += 1;
                }
                total += 1;
            }
            off += l.rows() * l.cols() + l.rows();
        }
    }
    let frac = ok as f64 / total as f64;
    outcome(
        frac >= 0.99,
        format!("{ok}/{total} weight gradients agree ({:.2}%)", frac * 100.0),
    )
}

const QAT_DELAY: u64 = 10_000;
const RECOVERY_WINDOW: u64 = 10_000;
const QAT_SEEDS: u64 = 5;

fn pendulum_run(seed: u64, delay: u64, total: u64) -> RewardLog {
    let agent_cfg = AgentConfig {
        hidden: vec![64, 64],
        tau: 0.005,
        quant_delay: delay,
        ..AgentConfig::default()
    };
    let train_cfg = TrainConfig {
        total_timesteps: total,
        batch_size: 64,
        warmup: 1000,
        eval_every: 1000,
        eval_episodes: 10,
        seed,
        ..TrainConfig::default()
    };
    let mut agent = Agent::new(3, 1, &agent_cfg, seed).unwrap();
    run_training(&mut agent, &mut Pendulum::new(), &train_cfg).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of the reward at each evaluation timestep.
fn median_curve(logs: &[RewardLog]) -> Vec<(u64, f64)> {
    logs[0]
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                r.timestep,
                median(logs.iter().map(|l| l.records[i].eval_reward).collect()),
            )
        })
        .collect()
}

/// Pendulum rewards are negative, so "80% of the best" is measured as
/// progress from the untrained policy (the first evaluation) towards the
/// best full-precision evaluation.
fn recovery_level(log: &RewardLog) -> f64 {
    let start = log.records[0].eval_reward;
    let best = log.best_between(0, QAT_DELAY).unwrap();
    start + 0.8 * (best - start)
}

fn qat_recovery() -> Outcome {
    let mut logs = Vec::new();
    for seed in 0..QAT_SEEDS {
        let t = Instant::now();
        let log = pendulum_run(seed, QAT_DELAY, 30_000);
        eprintln!(
            "  qat seed {seed}: best pre {:.1}, final {:.1}, switch {:?} ({:.0}s)",
            log.best_between(0, QAT_DELAY).unwrap_or(f64::NAN),
            log.final_reward().unwrap_or(f64::NAN),
            log.mode_switch_timestep,
            t.elapsed().as_secs_f64()
        );
        logs.push(log);
    }
    let level = median(logs.iter().map(recovery_level).collect());
    let curve = median_curve(&logs);
    let dip = curve.iter().find(|(t, _)| *t > QAT_DELAY).map_or(f64::NAN, |c| c.1);
    let recovered_at = curve
        .iter()
        .find(|(t, r)| *t > QAT_DELAY && *t <= QAT_DELAY + RECOVERY_WINDOW && *r >= level)
        .map(|c| c.0);
    let switched = logs.iter().all(|l| l.mode_switch_timestep == Some(QAT_DELAY));

    let budget = QAT_DELAY + RECOVERY_WINDOW;
    let mut cold = Vec::new();
    for seed in 0..QAT_SEEDS {
        let t = Instant::now();
        let log = pendulum_run(seed, 0, budget);
        eprintln!(
            "  cold seed {seed}: best {:.1} ({:.0}s)",
            log.best_between(0, budget).unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        cold.push(log);
    }
    let cold_best = median_curve(&cold).iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let cold_fails = cold_best < level;

    let pass = switched && recovered_at.is_some() && cold_fails;
    outcome(
        pass,
        format!(
            "level {level:.1}; median after switch {dip:.1}, recovered at {}; cold start best median {cold_best:.1} ({})",
            recovered_at.map_or("never".to_string(), |t| format!("t={t}")),
            if cold_fails { "fails" } else { "reaches level" }
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "env = \"pendulum\"\n\n[train]\ntotal_timesteps = 3000\nwarmup = 500\neval_every = 1000\neval_episodes = 2\nseed = 11\n\n\
         [agent]\nhidden = [64, 64]\nquant_delay = 1500\n",
    )
    .unwrap();
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_fxrl"))
            .args(["--quiet", "train", "--config"])
            .arg(&cfg)
            .arg("--output")
            .arg(out)
            .status()
            .expect("spawn fxrl");
        assert!(status.success());
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (csv, ck) = (same("rewards.csv"), same("checkpoint.bin"));
    outcome(
        csv && ck,
        format!("rewards.csv identical: {csv}, checkpoint.bin identical: {ck}"),
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Duration, Check); 10] = [
        ("weight-memory footprint", Duration::from_secs(1), weight_memory),
        ("activation-memory footprint", Duration::from_secs(1), activation_memory),
        ("PE datapath bit-exactness", Duration::from_secs(5), pe_datapath),
        (
            "simulator functional equivalence",
            Duration::from_secs(30),
            simulator_equivalence,
        ),
        ("dual-precision throughput", Duration::from_secs(1), dual_precision),
        ("training utilization", Duration::from_secs(1), utilization),
        ("accelerator IPS flatness", Duration::from_secs(1), ips_flatness),
        ("gradient fidelity", Duration::from_secs(60), gradient_fidelity),
        ("QAT recovery", Duration::from_secs(20 * 60), qat_recovery),
        ("determinism", Duration::from_secs(120), determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let time_note = if in_time {
            String::new()
        } else {
            format!(", over the {}s budget", limit.as_secs())
        };
        println!(
            "{} {id:>2}. {name}: {} [{:.2}s{time_note}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
