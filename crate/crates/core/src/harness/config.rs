use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::env::{EnvConfig, FeatureScales};
use crate::neural::ModelConfig;
use crate::policies::PolicyKind;
use crate::ppo::TrainConfig;

/// Network shape. Frame width, stack length and action count come from the
/// environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_out: usize,
    pub use_msce: bool,
    pub use_stin: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { d_model: 32, layers: 2, heads: 4, d_ff: 64, d_out: 32, use_msce: true, use_stin: true }
    }
}

impl ModelSpec {
    pub fn model_config(&self, env: &EnvConfig) -> ModelConfig {
        ModelConfig {
            d_raw: env.frame_width(),
            stack_len: env.stack_len,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            d_out: self.d_out,
            n_actions: env.departure_ids().len(),
            use_msce: self.use_msce,
            use_stin: self.use_stin,
        }
    }
}

/// Cells of the demand / capacity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub passengers: Vec<usize>,
    pub seats: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { passengers: vec![100, 200, 300], seats: vec![3, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub policy: PolicyKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// PPO updates for `train`.
    pub updates: usize,
    /// Learned policy acts by argmax instead of sampling.
    pub greedy: bool,
    /// During training, score the greedy policy on `validation_seeds` every
    /// this many updates and keep the best weights; 0 keeps the final ones.
    pub validate_every: usize,
    pub validation_seeds: Vec<u64>,
    pub env: EnvConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig {
            progress_feature: true,
            scales: FeatureScales { queue: 20.0, en_route: 20.0, ..FeatureScales::default() },
            ..EnvConfig::default()
        };
        Self {
            policy: PolicyKind::Qtti,
            seeds: (0..10).collect(),
            out: PathBuf::from("out"),
            updates: 500,
            greedy: true,
            validate_every: 10,
            validation_seeds: (1000..1005).collect(),
            env,
            model: ModelSpec::default(),
            train: TrainConfig { gae_lambda: Some(0.99), ..TrainConfig::default() },
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        self.env.validate()?;
        self.train.validate()?;
        self.model.model_config(&self.env).validate()?;
        if self.validate_every > 0 && self.validation_seeds.is_empty() {
            return Err(HarnessError::Config("validation_seeds must not be empty when validate_every > 0".into()));
        }
        if self.sweep.passengers.is_empty() || self.sweep.seats.is_empty() {
            return Err(HarnessError::Config("sweep grid must not be empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config(&self.env)
    }
}

/// Parses a TOML run config. Keys are layered over [`RunConfig::default`]
/// table by table, so a partial `[train]` keeps the other run defaults.
/// Unknown keys are rejected by their dotted path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
    let mut merged = toml::Value::try_from(RunConfig::default()).map_err(|e| HarnessError::Config(e.to_string()))?;
    merge(&mut merged, toml::Value::Table(user));
    let mut unknown = Vec::new();
    let cfg: RunConfig = serde_ignored::deserialize(merged, |path| unknown.push(path.to_string()))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(key) = unknown.first() {
        return Err(HarnessError::Config(format!("unknown key {key}")));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Overwrites `base` with `over`, recursing into tables present in both.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.gamma, 0.99);
        assert_eq!(cfg.train.clip_eps, 0.2);
        assert_eq!(cfg.env.stack_len, 6);
        assert_eq!(cfg.env.horizon_steps, 600);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_config("foo = 1").unwrap_err().to_string();
        assert!(e.contains("unknown key foo"), "{e}");
        let e = parse_config("[env]\nbar = 2").unwrap_err().to_string();
        assert!(e.contains("unknown key env.bar"), "{e}");
    }

    #[test]
    fn partial_tables_keep_run_defaults() {
        let cfg = parse_config("[train]\nepochs = 2\n[env]\nseats = 4").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train, TrainConfig { epochs: 2, ..d.train });
        assert_eq!(cfg.env, EnvConfig { seats: 4, ..d.env });
    }

    #[test]
    fn out_of_range_values() {
        let e = parse_config("[train]\ngamma = 1.5").unwrap_err().to_string();
        assert!(e.contains("gamma"), "{e}");
        assert!(parse_config("seeds = []").is_err());
        let e = parse_config("policy = \"best\"").unwrap_err().to_string();
        assert!(e.contains("best"), "{e}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config("policy = \"spf\"\nseeds = [3, 4]\n[env]\nseats = 4\n[model]\nuse_stin = false").unwrap();
        assert_eq!(cfg.policy, PolicyKind::Spf);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.env.seats, 4);
        assert!(!cfg.model.use_stin);
    }
}
