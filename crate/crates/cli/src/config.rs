//! Run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, command
//! line flags. The file is TOML; a `summary.json` from an earlier run is also
//! accepted and its embedded `config` is used as is.

use std::fmt;
use std::path::{Path, PathBuf};

use fxrl_core::accel_sim::{AapConfig, NetDims};
use fxrl_core::ddpg::{AgentConfig, TrainConfig};
use fxrl_core::env::{env_spec, EnvSpec};
use fxrl_core::par::Exec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub output_dir: PathBuf,
    pub exec: Exec,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub accel: AapConfig,
    pub sim: SimConfig,
    /// Set when the file leaves `agent.quant_delay` out: the delay then
    /// follows `train.total_timesteps` at 30%.
    #[serde(skip)]
    auto_delay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "pendulum".into(),
            output_dir: PathBuf::from("runs/default"),
            exec: Exec::default(),
            train: TrainConfig::default(),
            agent: AgentConfig::default(),
            accel: AapConfig::default(),
            sim: SimConfig::default(),
            auto_delay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Explicit layer widths per network, input first. When absent the
    /// actor and critic shapes follow from `env` and `agent.hidden`.
    pub networks: Option<Vec<Vec<usize>>>,
    /// Host time per timestep added for platform IPS.
    pub host_latency_s: f64,
    /// Measured board power; IPS/W is reported only when set.
    pub watts: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            networks: None,
            host_latency_s: 0.0,
            watts: None,
        }
    }
}

/// Configuration error, located in the source file when possible.
#[derive(Debug)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.path, self.line) {
            (Some(p), Some(l)) => write!(f, "{}:{}: {}", p.display(), l, self.message),
            (Some(p), None) => write!(f, "{}: {}", p.display(), self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub batch: Option<usize>,
    pub timesteps: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// 1-based line of `key = ...` inside `[table]` (or at top level).
fn locate(src: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = Some(t.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let in_table = match table {
            Some(name) => current.as_deref() == Some(name),
            None => current.is_none(),
        };
        if in_table {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.into()),
            line: None,
            message: e.to_string(),
        })?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg = if is_json {
            Self::parse_json(&src)
        } else {
            Self::parse_toml(&src)
        };
        let cfg = cfg.map_err(|mut e| {
            e.path = Some(path.into());
            e
        })?;
        cfg.validate_in(&src).map_err(|mut e| {
            e.path = Some(path.into());
            e
        })?;
        Ok(cfg)
    }

    pub fn parse_toml(src: &str) -> Result<Self, ConfigError> {
        let err = |e: toml::de::Error| ConfigError {
            path: None,
            line: e.span().map(|s| line_of_offset(src, s.start)),
            message: e.message().to_string(),
        };
        let table: toml::Table = toml::from_str(src).map_err(err)?;
        let explicit = table.get("agent").and_then(|a| a.get("quant_delay")).is_some();
        let mut cfg: RunConfig = toml::from_str(src).map_err(err)?;
        cfg.auto_delay = !explicit;
        cfg.resolve_delay();
        Ok(cfg)
    }

    fn resolve_delay(&mut self) {
        if self.auto_delay {
            self.agent.quant_delay = self.train.total_timesteps * 3 / 10;
        }
    }

    fn parse_json(src: &str) -> Result<Self, ConfigError> {
        let err = |e: serde_json::Error| ConfigError {
            path: None,
            line: Some(e.line()),
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(src).map_err(err)?;
        let inner = value.get("config").cloned().unwrap_or(value);
        let explicit = inner.get("agent").and_then(|a| a.get("quant_delay")).is_some();
        let mut cfg: RunConfig = serde_json::from_value(inner).map_err(err)?;
        cfg.auto_delay = !explicit;
        cfg.resolve_delay();
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
        if let Some(t) = o.timesteps {
            self.train.total_timesteps = t;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        self.resolve_delay();
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in("")
    }

    /// Semantic checks; `src` is only used to point at the offending line.
    fn validate_in(&self, src: &str) -> Result<(), ConfigError> {
        let fail = |table: Option<&str>, key: &str, message: String| ConfigError {
            path: None,
            line: locate(src, table, key),
            message,
        };
        env_spec(&self.env).map_err(|e| fail(None, "env", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| fail(Some("train"), first_key(&e.to_string(), TRAIN_KEYS), e.to_string()))?;
        self.agent
            .validate()
            .map_err(|e| fail(Some("agent"), first_key(&e.to_string(), AGENT_KEYS), e.to_string()))?;
        self.accel
            .validate()
            .map_err(|e| fail(Some("accel"), first_key(&e.to_string(), ACCEL_KEYS), e.to_string()))?;
        if let Some(nets) = &self.sim.networks {
            if nets.is_empty() || nets.iter().any(|w| w.len() < 2 || w.contains(&0)) {
                return Err(fail(
                    Some("sim"),
                    "networks",
                    "sim.networks needs at least one network with two or more non-zero widths".into(),
                ));
            }
        }
        if !(self.sim.host_latency_s >= 0.0) {
            return Err(fail(
                Some("sim"),
                "host_latency_s",
                "host_latency_s must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn env_spec(&self) -> EnvSpec {
        env_spec(&self.env).expect("validated")
    }

    /// Network shapes for the simulator.
    pub fn sim_networks(&self) -> Vec<NetDims> {
        match &self.sim.networks {
            Some(nets) => nets.iter().map(|w| NetDims::from_widths(w)).collect(),
            None => {
                let spec = self.env_spec();
                let h = &self.agent.hidden;
                let actor: Vec<usize> = std::iter::once(spec.state_dim)
                    .chain(h.iter().copied())
                    .chain([spec.action_dim])
                    .collect();
                let critic: Vec<usize> = std::iter::once(spec.state_dim + spec.action_dim)
                    .chain(h.iter().copied())
                    .chain([1])
                    .collect();
                vec![NetDims::from_widths(&actor), NetDims::from_widths(&critic)]
            }
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "total_timesteps",
    "batch_size",
    "eval_every",
    "eval_episodes",
    "replay_capacity",
];
const AGENT_KEYS: &[&str] = &[
    "gamma",
    "tau",
    "hidden",
    "noise_sigma",
    "quant_bits",
    "actor_lr",
    "critic_lr",
];
const ACCEL_KEYS: &[&str] = &["n_cores", "pe_rows", "pe_cols", "weight_word_bits", "clock_hz"];

/// The first known key mentioned in an error message.
fn first_key<'a>(message: &str, keys: &[&'a str]) -> &'a str {
    keys.iter().copied().find(|k| message.contains(k)).unwrap_or("")
}
