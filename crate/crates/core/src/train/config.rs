//! Training configuration: flat `key = value` TOML, overridden by
//! `PLAY_<KEY>` environment variables, overridden by command-line values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use crate::diffusion::DropoutProbs;
use crate::error::{Error, Result};
use crate::nn::ArchConfig;

pub const ENV_PREFIX: &str = "PLAY_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub p_audio: f64,
    pub p_emotion: f64,
    pub seed: u64,
    /// Directory of clip files.
    pub dataset: String,
    /// Normalization statistics file.
    pub stats: String,
    /// Checkpoint written at the end of training.
    pub out: String,
    /// Write `out` every this many steps as well; 0 disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub window: usize,
    pub prev_frames: usize,
    /// Probability of training a window with the start tokens instead of a
    /// previous window.
    pub start_prob: f64,
    /// Use `√(1 − ᾱ)` instead of `1 − ᾱ` when corrupting the previous window.
    pub prev_noise_sqrt: bool,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub dit_blocks: usize,
    pub dit_mlp_mult: usize,
    pub diffusion_steps: usize,
    /// Stage-1 checkpoint; required for stage 2.
    pub backbone: String,
    /// Checkpoint to continue from; empty starts fresh.
    pub resume: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            stage: 1,
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            p_audio: 0.1,
            p_emotion: 0.1,
            seed: 0,
            dataset: "data".into(),
            stats: "data/stats.json".into(),
            out: "model.ckpt".into(),
            checkpoint_every: 0,
            log_every: 100,
            window: arch.window,
            prev_frames: arch.prev_frames,
            start_prob: 0.1,
            prev_noise_sqrt: false,
            width: arch.width,
            blocks: arch.blocks,
            heads: arch.heads,
            conv_kernel: arch.conv_kernel,
            ffn_mult: arch.ffn_mult,
            dit_blocks: arch.dit_blocks,
            dit_mlp_mult: arch.dit_mlp_mult,
            diffusion_steps: arch.diffusion_steps,
            backbone: String::new(),
            resume: String::new(),
        }
    }
}

/// Keys that do not change what is learned, so a resumed run may alter them.
const RUN_ONLY_KEYS: [&str; 6] = ["steps", "out", "checkpoint_every", "log_every", "resume", "backbone"];

impl TrainConfig {
    /// Every accepted key, in declaration order.
    pub fn keys() -> Vec<String> {
        Self::default().to_table().keys().cloned().collect()
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    /// Layers `file`, then `PLAY_<KEY>` variables from `env`, then
    /// `overrides` on top of the defaults and validates the result.
    pub fn resolve(
        file: Option<&str>,
        env: &BTreeMap<String, String>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut table = Self::default().to_table();
        let known = Self::keys();
        if let Some(text) = file {
            let parsed: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
            for (k, v) in parsed {
                if !known.contains(&k) {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
                table.insert(k, v);
            }
        }
        for key in &known {
            if let Some(raw) = env.get(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
                table.insert(key.clone(), parse_value(key, raw, &table)?);
            }
        }
        for (k, raw) in overrides {
            if !known.contains(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            table.insert(k.clone(), parse_value(k, raw, &table)?);
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::resolve(Some(&text), &env, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        if !(0.0..=1.0).contains(&self.start_prob) {
            return Err(Error::Config("start_prob must be in [0, 1]".into()));
        }
        self.dropout().validate()?;
        if self.stage == 2 && self.backbone.is_empty() {
            return Err(Error::Config("stage 2 requires a backbone checkpoint".into()));
        }
        self.arch(1, 1).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn dropout(&self) -> DropoutProbs {
        DropoutProbs {
            audio: self.p_audio,
            emotion: self.p_emotion,
        }
    }

    /// Architecture for data with `keypoints` keypoints and `audio_dim`
    /// feature bands.
    pub fn arch(&self, keypoints: usize, audio_dim: usize) -> ArchConfig {
        ArchConfig {
            keypoints,
            audio_dim,
            width: self.width,
            blocks: self.blocks,
            heads: self.heads,
            conv_kernel: self.conv_kernel,
            ffn_mult: self.ffn_mult,
            window: self.window,
            prev_frames: self.prev_frames,
            dit_blocks: self.dit_blocks,
            dit_mlp_mult: self.dit_mlp_mult,
            diffusion_steps: self.diffusion_steps,
        }
    }

    /// Hash of every setting that affects the optimization trajectory.
    pub fn hash(&self) -> String {
        let mut table = self.to_table();
        for k in RUN_ONLY_KEYS {
            table.remove(k);
        }
        for k in ["dataset", "stats"] {
            table.remove(k);
        }
        let json = serde_json::to_vec(&table).expect("table serializes");
        crate::nn::hex(&Sha256::digest(&json))
    }
}

/// Reads a scalar override with the type of the current value for `key`.
fn parse_value(key: &str, raw: &str, table: &toml::Table) -> Result<toml::Value> {
    let bad = || Error::Config(format!("invalid value `{raw}` for `{key}`"));
    Ok(match table.get(key) {
        Some(toml::Value::Integer(_)) => toml::Value::Integer(raw.trim().parse().map_err(|_| bad())?),
        Some(toml::Value::Float(_)) => toml::Value::Float(raw.trim().parse().map_err(|_| bad())?),
        Some(toml::Value::Boolean(_)) => toml::Value::Boolean(raw.trim().parse().map_err(|_| bad())?),
        _ => toml::Value::String(raw.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn layering_order_is_file_then_env_then_flags() {
        let file = "steps = 10\nlearning_rate = 0.01\nseed = 3\n";
        let cfg = TrainConfig::resolve(Some(file), &env(&[]), &[]).unwrap();
        assert_eq!((cfg.steps, cfg.learning_rate, cfg.seed), (10, 0.01, 3));
        let cfg = TrainConfig::resolve(Some(file), &env(&[("PLAY_STEPS", "20"), ("PLAY_SEED", "4")]), &[]).unwrap();
        assert_eq!((cfg.steps, cfg.seed), (20, 4));
        let cfg = TrainConfig::resolve(
            Some(file),
            &env(&[("PLAY_STEPS", "20")]),
            &[("steps".into(), "30".into()), ("prev_noise_sqrt".into(), "true".into())],
        )
        .unwrap();
        assert_eq!(cfg.steps, 30);
        assert!(cfg.prev_noise_sqrt);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(
            TrainConfig::resolve(Some("stepz = 3"), &env(&[]), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::resolve(None, &env(&[]), &[("nope".into(), "1".into())]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::resolve(None, &env(&[("PLAY_STEPS", "many")]), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::resolve(Some("steps = \"x\""), &env(&[]), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::resolve(Some("learning_rate = -1.0"), &env(&[]), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::resolve(Some("stage = 2"), &env(&[]), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = TrainConfig {
            steps: 7,
            backbone: "b.ckpt".into(),
            ..TrainConfig::default()
        };
        let back = TrainConfig::resolve(Some(&cfg.to_toml()), &env(&[]), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_run_only_settings() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.steps = 99;
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.learning_rate = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
