//! Run configuration: one TOML document, dotted-key overrides, presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSizes, GrammarConfig};
use crate::corruption::Replacement;
use crate::encoder::ModelConfig;
use crate::objectives::ObjectiveMode;
use crate::tensor::optim::AdamConfig;
use crate::{Error, Result};

/// Alternative readings of the copy ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoCopyVariant {
    /// Drop the copy loss, keep the copy mechanism inside `p_LM`.
    #[default]
    DropLoss,
    /// Drop the copy loss and the mechanism: plain softmax LM at masked positions.
    DropMechanism,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: ObjectiveMode,
    pub steps: u64,
    /// Origin sequences per step (`N`); the main model sees `2N` views when
    /// the contrastive loss is active.
    pub batch_origins: usize,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub mask_rate: f64,
    pub crop_keep: f64,
    pub lambda_copy: f64,
    pub tau: f64,
    pub clip_norm: f64,
    pub replacement: Replacement,
    pub no_copy_variant: NoCopyVariant,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::FullCocolm,
            steps: 3000,
            batch_origins: 16,
            lr_peak: 1e-3,
            warmup_steps: 300,
            mask_rate: 0.15,
            crop_keep: 0.9,
            lambda_copy: 50.0,
            tau: 1.0,
            clip_norm: 2.0,
            replacement: Replacement::Auxiliary,
            no_copy_variant: NoCopyVariant::DropLoss,
            checkpoint_every: 500,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the corpus files and `vocab.txt`.
    pub dir: PathBuf,
    pub max_vocab: usize,
    pub num_docs: usize,
    pub heldout_docs: usize,
    pub num_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            max_vocab: 1000,
            num_docs: 4000,
            heldout_docs: 200,
            num_pairs: 200,
        }
    }
}

impl DataConfig {
    pub fn sizes(&self) -> CorpusSizes {
        CorpusSizes {
            num_docs: self.num_docs,
            heldout_docs: self.heldout_docs,
            num_pairs: self.num_pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe every this many steps during training (0: only at the end).
    pub every: u64,
    /// Held-out sequences used per probe.
    pub heldout_sequences: usize,
    pub batch_origins: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            every: 250,
            heldout_sequences: 128,
            batch_origins: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub coords_per_param: usize,
    pub batch_origins: usize,
    /// Factor applied to the initial weight matrices before checking.
    pub weight_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tolerance: 1e-4,
            coords_per_param: 4,
            batch_origins: 2,
            weight_scale: 3.0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            relpos_num_buckets: 32,
            relpos_max_distance: 128,
            max_seq_len: 64,
            aux_layer_ratio: 1.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub trainer: TrainerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub grammar: GrammarConfig,
    pub probe: ProbeConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// Desk-scale preset: minutes per run on one CPU core.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            trainer: TrainerConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            grammar: GrammarConfig::default(),
            probe: ProbeConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }

    /// Smallest configuration exercising every code path.
    pub fn micro() -> Self {
        let mut c = Self::desk();
        c.trainer.steps = 20;
        c.trainer.batch_origins = 2;
        c.trainer.warmup_steps = 4;
        c.trainer.checkpoint_every = 10;
        c.model = ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
            relpos_num_buckets: 8,
            relpos_max_distance: 16,
            max_seq_len: 12,
            aux_layer_ratio: 1.0 / 3.0,
        };
        c.data.max_vocab = 32;
        c.data.num_docs = 200;
        c.data.heldout_docs = 20;
        c.data.num_pairs = 20;
        c.probe = ProbeConfig {
            every: 10,
            heldout_sequences: 8,
            batch_origins: 2,
        };
        c
    }

    /// Base-size pretraining hyperparameters, for reference;
    /// far beyond what this engine is meant to run.
    pub fn paper_base() -> Self {
        let mut c = Self::desk();
        c.trainer.steps = 125_000;
        c.trainer.batch_origins = 2048;
        c.trainer.lr_peak = 5e-4;
        c.trainer.warmup_steps = 10_000;
        c.trainer.checkpoint_every = 10_000;
        c.model = ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            dropout: 0.1,
            relpos_num_buckets: 32,
            relpos_max_distance: 128,
            max_seq_len: 512,
            aux_layer_ratio: 1.0 / 3.0,
        };
        c.data.max_vocab = 32_768;
        c.probe.every = 10_000;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "micro" => Some(Self::micro()),
            "paper_base" => Some(Self::paper_base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.trainer;
        if t.warmup_steps > t.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                t.warmup_steps, t.steps
            )));
        }
        if t.mode.uses_scl() && t.batch_origins < 2 {
            return Err(Error::ContrastBatchTooSmall(t.batch_origins));
        }
        if t.batch_origins == 0 {
            return Err(Error::Config("batch_origins must be positive".into()));
        }
        if !(t.mask_rate > 0.0 && t.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", t.mask_rate)));
        }
        if !(t.crop_keep > 0.0 && t.crop_keep <= 1.0) {
            return Err(Error::Config(format!("crop_keep {} outside (0, 1]", t.crop_keep)));
        }
        if t.lambda_copy <= 0.0 || t.tau <= 0.0 || t.clip_norm <= 0.0 || t.lr_peak < 0.0 {
            return Err(Error::Config(
                "lambda_copy, tau and clip_norm must be positive, lr_peak non-negative".into(),
            ));
        }
        if t.no_copy_variant == NoCopyVariant::DropMechanism && t.mode != ObjectiveMode::ClmNoCopy {
            return Err(Error::Config(
                "no_copy_variant = drop_mechanism only applies to mode clm_no_copy".into(),
            ));
        }
        if self.probe.batch_origins < 2 {
            return Err(Error::ContrastBatchTooSmall(self.probe.batch_origins));
        }
        if self.grad_check.batch_origins < 2 {
            return Err(Error::ContrastBatchTooSmall(self.grad_check.batch_origins));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` overrides, e.g. `trainer.steps=10`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not KEY=VALUE", o.as_ref())))?;
            set_dotted(&mut value, key.trim(), raw.trim())?;
        }
        let c: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// Every settable dotted key.
    pub fn keys() -> Vec<String> {
        let value = toml::Value::try_from(Self::desk()).expect("config serializes");
        let mut out = Vec::new();
        collect_keys(&value, String::new(), &mut out);
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn collect_keys(v: &toml::Value, prefix: String, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(child, key, out);
            }
        }
        _ => out.push(prefix),
    }
}

fn parse_value(raw: &str, like: &toml::Value) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, like) {
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(p), toml::Value::String(_)) if !p.is_str() => toml::Value::String(raw.to_string()),
        (Some(p), _) => p,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::UnknownKey {
        key: key.to_string(),
        valid: Config::keys(),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(unknown)?;
        let child = table.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if child.is_table() {
                return Err(unknown());
            }
            *child = parse_value(raw, child);
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = Config::desk()
            .with_overrides(&["trainer.steps=10", "trainer.lr_peak=1", "trainer.mode=clm_only"])
            .unwrap();
        assert_eq!(c.trainer.steps, 10);
        assert_eq!(c.trainer.lr_peak, 1.0);
        assert_eq!(c.trainer.mode, ObjectiveMode::ClmOnly);
        match Config::desk().with_overrides(&["trainer.stepz=3"]) {
            Err(Error::UnknownKey { valid, .. }) => assert!(valid.contains(&"trainer.steps".to_string())),
            other => panic!("{other:?}"),
        }
        assert!(Config::desk().with_overrides(&["trainer=3"]).is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        for c in [Config::desk(), Config::micro(), Config::paper_base()] {
            c.validate().unwrap();
            let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_ne!(Config::desk().hash(), Config::micro().hash());
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = Config::from_toml_str("seed = 9\n[trainer]\nsteps = 5\nwarmup_steps = 1\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.trainer.steps, 5);
        assert_eq!(c.model, ModelConfig::default());
        assert!(Config::from_toml_str("[trainer]\nbogus = 1\n").is_err());
    }
}
