//! Run configuration files, named presets and `key=value` overrides.
//!
//! A run config is TOML with three tables mirroring the library types:
//!
//! ```toml
//! name = "coverage-n3-desk-priority"
//! seeds = [0, 1, 2]
//! # output_dir = "runs"          # optional
//!
//! [env]
//! task = "coverage"              # or "formation"
//! n_agents = 3
//! n_landmarks = 3
//!
//! [network]
//! n_agents = 3
//! slots = 1
//! mode = "priority"              # or "roundrobin"
//!
//! [train]
//! total_steps = 200000
//! ```
//!
//! Every omitted field takes its library default. Unknown keys are errors.

use std::path::{Path, PathBuf};

use priocomm_core::comm::{CommMode, NetworkConfig};
use priocomm_core::env::EnvConfig;
use priocomm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!(
                "name {:?} is not a usable directory name",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        self.env.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.env.n_agents != self.network.n_agents {
            return Err(CliError::Config(format!(
                "env.n_agents ({}) and network.n_agents ({}) differ",
                self.env.n_agents, self.network.n_agents
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serializable")
    }

    /// Apply `section.field=value` overrides. Values are parsed as TOML
    /// (`1e-3`, `true`, `[64, 64]`, `"formation"`); anything that does not
    /// parse is taken as a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut doc, &path, value).map_err(|m| CliError::Config(format!("override {key}: {m}")))?;
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output root: explicit flag, then the config, then `PRIOCOMM_OUTPUT_DIR`,
    /// then `runs`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

pub const OUTPUT_ENV: &str = "PRIOCOMM_OUTPUT_DIR";

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, path: &[&str], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = doc;
    for p in parents {
        let table = node.as_table_mut().ok_or_else(|| format!("{p} is not a table"))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| format!("{last} has no parent table"))?
        .insert(last.to_string(), value);
    Ok(())
}

/// A named experiment setting. The communication mode selects the slot
/// count: `priority_slots` for the learned-priority method, `round_robin_slots`
/// for the baseline.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub priority_slots: usize,
    pub round_robin_slots: usize,
    build: fn() -> RunConfig,
}

impl Preset {
    pub fn config(&self, mode: CommMode) -> RunConfig {
        let mut cfg = (self.build)();
        cfg.network.mode = mode;
        cfg.network.slots = match mode {
            CommMode::Priority => self.priority_slots,
            CommMode::RoundRobin => self.round_robin_slots,
        };
        cfg.name = format!("{}-{}", self.name, mode.as_str());
        cfg
    }
}

fn base(env: EnvConfig, train: TrainConfig) -> RunConfig {
    RunConfig {
        name: String::new(),
        seeds: vec![0, 1, 2],
        output_dir: None,
        network: NetworkConfig {
            n_agents: env.n_agents,
            ..NetworkConfig::default()
        },
        env,
        train,
    }
}

fn coverage_full() -> RunConfig {
    base(
        EnvConfig::coverage(3, 3),
        TrainConfig {
            total_steps: 10_000_000,
            ..TrainConfig::default()
        },
    )
}

fn formation_full() -> RunConfig {
    base(
        EnvConfig::formation(8),
        TrainConfig {
            total_steps: 10_000_000,
            ..TrainConfig::default()
        },
    )
}

/// Small-budget settings that learn within a few hundred thousand steps on
/// one core.
pub fn desk_train(total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        rollout_len: 1024,
        epochs: 10,
        minibatch_size: 128,
        actor_lr: 3e-4,
        critic_lr: 3e-3,
        gamma: 0.95,
        initial_log_std: 0.0,
        eval_interval: 20,
        ..TrainConfig::default()
    }
}

fn coverage_desk() -> RunConfig {
    base(EnvConfig::coverage(3, 3), desk_train(200_000))
}

fn formation_desk() -> RunConfig {
    // eight agents make each update pass costlier
    let train = TrainConfig {
        epochs: 5,
        minibatch_size: 256,
        ..desk_train(500_000)
    };
    base(EnvConfig::formation(8), train)
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "coverage-n3",
        description: "Coverage, 3 agents, 3 landmarks, 1 slot, 10M steps",
        priority_slots: 1,
        round_robin_slots: 1,
        build: coverage_full,
    },
    Preset {
        name: "coverage-n3-desk",
        description: "Coverage, 3 agents, 3 landmarks, 1 slot, 200k steps",
        priority_slots: 1,
        round_robin_slots: 1,
        build: coverage_desk,
    },
    Preset {
        name: "formation-n8",
        description: "Formation, 8 agents; 1 priority slot or 2 round-robin slots, 10M steps",
        priority_slots: 1,
        round_robin_slots: 2,
        build: formation_full,
    },
    Preset {
        name: "formation-n8-desk",
        description: "Formation, 8 agents; 1 priority slot or 2 round-robin slots, 500k steps",
        priority_slots: 1,
        round_robin_slots: 2,
        build: formation_desk,
    },
];

pub fn preset(name: &str) -> Result<&'static Preset, CliError> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        CliError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_to_valid_configs() {
        for p in PRESETS {
            for mode in [CommMode::Priority, CommMode::RoundRobin] {
                let cfg = p.config(mode);
                cfg.validate().unwrap();
                let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
                assert_eq!(back, cfg);
            }
        }
        let rr = preset("formation-n8-desk").unwrap().config(CommMode::RoundRobin);
        assert_eq!((rr.network.slots, rr.network.mode), (2, CommMode::RoundRobin));
        assert_eq!(rr.name, "formation-n8-desk-roundrobin");
    }

    #[test]
    fn overrides_win_and_are_typed() {
        let cfg = preset("coverage-n3-desk").unwrap().config(CommMode::Priority);
        let out = cfg
            .with_overrides(&[
                "train.actor_lr=5e-4".into(),
                "train.hidden_sizes=[16, 16]".into(),
                "network.mode=roundrobin".into(),
                "seeds=[4]".into(),
            ])
            .unwrap();
        assert_eq!(out.train.actor_lr, 5e-4);
        assert_eq!(out.train.hidden_sizes, vec![16, 16]);
        assert_eq!(out.network.mode, CommMode::RoundRobin);
        assert_eq!(out.seeds, vec![4]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let cfg = preset("coverage-n3-desk").unwrap().config(CommMode::Priority);
        for bad in ["train.no_such_field=1", "train.gamma=1.5", "novalue", "network.slots=3"] {
            assert!(
                matches!(cfg.with_overrides(&[bad.into()]), Err(CliError::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("nope").unwrap_err().to_string();
        assert!(err.contains("coverage-n3-desk") && err.contains("formation-n8"));
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml("name = \"x\"\n").unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(RunConfig::from_toml("name = \"x\"\nbogus = 1\n").is_err());
    }
}
