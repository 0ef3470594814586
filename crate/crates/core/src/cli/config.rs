//! Flat key-value experiment configuration.
//!
//! Each command declares its keys with defaults. Values are resolved as
//! defaults, then the `--config` file, then `--set key=value` overrides.
//! Unknown keys and type mismatches are rejected with the key named.

use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;

use crate::error::{Error, Result};
use crate::lm::optim::AdamConfig;
use crate::lm::{ModelConfig, TrainConfig};
use crate::dpo::DpoConfig;
use crate::ppo::{ForwardMode, PpoConfig};

/// Resolved configuration in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

fn int(v: i64) -> Value {
    Value::Integer(v)
}

fn float(v: f64) -> Value {
    Value::Float(v)
}

fn adam_keys(a: &AdamConfig) -> Vec<(&'static str, Value)> {
    vec![
        ("adam_beta1", float(a.beta1)),
        ("adam_beta2", float(a.beta2)),
        ("adam_eps", float(a.eps)),
        ("weight_decay", float(a.weight_decay)),
    ]
}

fn train_keys(t: &TrainConfig) -> Vec<(&'static str, Value)> {
    let mut k = vec![
        ("eta", float(t.learning_rate)),
        ("final_lr_ratio", float(t.final_lr_ratio)),
        ("warmup", float(t.warmup_fraction)),
        ("epochs", int(t.epochs as i64)),
        ("batch_size", int(t.batch_size as i64)),
        ("max_steps", int(t.max_steps.unwrap_or(0) as i64)),
        ("clip", float(t.grad_clip_norm)),
        ("seed", int(t.seed as i64)),
    ];
    k.extend(adam_keys(&t.adam));
    k
}

/// Keys and defaults for supervised finetuning, including the model shape
/// used when no initial checkpoint is given.
pub fn sft_defaults() -> Vec<(&'static str, Value)> {
    let m = ModelConfig::default();
    let mut k = train_keys(&TrainConfig::sft_defaults());
    k.extend([
        ("width", int(m.width as i64)),
        ("layers", int(m.layers as i64)),
        ("heads", int(m.heads as i64)),
        ("context", int(m.context as i64)),
    ]);
    k
}

pub fn rm_defaults() -> Vec<(&'static str, Value)> {
    train_keys(&TrainConfig::reward_defaults())
}

pub fn dpo_defaults() -> Vec<(&'static str, Value)> {
    let d = DpoConfig::default();
    let mut k = vec![
        ("beta", float(d.beta)),
        ("eta", float(d.learning_rate)),
        ("epochs", int(d.epochs as i64)),
        ("warmup", float(d.warmup_fraction)),
        ("batch_size", int(d.batch_size as i64)),
        ("clip", float(d.grad_clip_norm)),
        ("seed", int(d.seed as i64)),
    ];
    k.extend(adam_keys(&d.adam));
    k
}

pub fn ppo_defaults() -> Vec<(&'static str, Value)> {
    let p = PpoConfig::default();
    let mut k = vec![
        ("B", int(p.batch_prompts as i64)),
        ("r", int(p.rollouts_per_prompt as i64)),
        ("b", int(p.minibatch as i64)),
        ("g", int(p.grad_accum as i64)),
        ("E", int(p.epochs as i64)),
        ("e", int(p.inner_epochs as i64)),
        ("L_p", int(p.max_prompt_len as i64)),
        ("L_c", int(p.max_len as i64)),
        ("tau", float(p.tau)),
        ("beta", float(p.beta)),
        ("gamma", float(p.gamma)),
        ("lam", float(p.lam)),
        ("eps_clip", float(p.eps_clip)),
        ("alpha", float(p.alpha)),
        ("eta", float(p.eta)),
        ("warmup", float(p.warmup_fraction)),
        ("clip", float(p.grad_clip_norm)),
        ("trunc_penalty", float(p.trunc_penalty)),
        ("seed", int(p.seed as i64)),
        ("forward_mode", Value::String(p.forward_mode.as_str().into())),
        ("max_steps", int(0)),
    ];
    k.extend(adam_keys(&p.adam));
    k
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        _ => "table or array",
    }
}

/// Coerce `v` to the type of `default`; integers are accepted for floats.
fn coerce(key: &str, default: &Value, v: Value) -> Result<Value> {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Integer(_), Value::Integer(i)) if i < 0 => {
            Err(Error::Config(format!("`{key}` must be non-negative, got {i}")))
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(Error::Config(format!("`{key}` expects a {}, got a {}", kind_name(d), kind_name(&v)))),
    }
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl Config {
    /// Resolve defaults, an optional file and `key=value` overrides.
    /// `seed_env` replaces the seed default when set.
    pub fn resolve(
        defaults: Vec<(&'static str, Value)>,
        file: Option<&Path>,
        overrides: &[String],
        seed_env: Option<u64>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, Value> = defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        if let (Some(seed), Some(slot)) = (seed_env, values.get_mut("seed")) {
            *slot = int(seed as i64);
        }
        let mut apply = |k: &str, v: Value| -> Result<()> {
            let slot = values.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key `{k}`")))?;
            *slot = coerce(k, slot, v)?;
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            for (k, v) in table {
                apply(&k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            apply(k.trim(), parse_override(v.trim()))?;
        }
        Ok(Self { values })
    }

    /// Re-read a serialized config against the same key set.
    pub fn parse(defaults: Vec<(&'static str, Value)>, text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut values: BTreeMap<String, Value> = defaults.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (k, v) in table {
            let slot = values.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown config key `{k}`")))?;
            *slot = coerce(&k, slot, v)?;
        }
        Ok(Self { values })
    }

    pub fn to_toml(&self) -> String {
        let table: toml::Table = self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        toml::to_string(&table).expect("flat tables serialize")
    }

    pub fn set(&mut self, key: &str, v: Value) -> Result<()> {
        let slot = self.values.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = coerce(key, slot, v)?;
        Ok(())
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(f) => *f,
            Value::Integer(i) => *i as f64,
            v => panic!("`{key}` is a {}", kind_name(v)),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        match self.get(key) {
            Value::Integer(i) => *i as usize,
            v => panic!("`{key}` is a {}", kind_name(v)),
        }
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.usize(key) as u64
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::String(s) => s,
            v => panic!("`{key}` is a {}", kind_name(v)),
        }
    }

    fn optional_steps(&self) -> Option<usize> {
        Some(self.usize("max_steps")).filter(|&n| n > 0)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.f64("adam_beta1"),
            beta2: self.f64("adam_beta2"),
            eps: self.f64("adam_eps"),
            weight_decay: self.f64("weight_decay"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.f64("eta"),
            final_lr_ratio: self.f64("final_lr_ratio"),
            warmup_fraction: self.f64("warmup"),
            epochs: self.usize("epochs"),
            batch_size: self.usize("batch_size"),
            max_steps: self.optional_steps(),
            adam: self.adam(),
            grad_clip_norm: self.f64("clip"),
            seed: self.u64("seed"),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.usize("width"), self.usize("layers"), self.usize("heads"), self.usize("context"))
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.f64("beta"),
            learning_rate: self.f64("eta"),
            epochs: self.usize("epochs"),
            warmup_fraction: self.f64("warmup"),
            batch_size: self.usize("batch_size"),
            seed: self.u64("seed"),
            adam: self.adam(),
            grad_clip_norm: self.f64("clip"),
        }
    }

    pub fn ppo_config(&self) -> Result<PpoConfig> {
        let mode = self.str("forward_mode");
        let forward_mode = ForwardMode::parse(mode)
            .ok_or_else(|| Error::Config(format!("`forward_mode` must be auto, batch or minibatch, got `{mode}`")))?;
        let c = PpoConfig {
            batch_prompts: self.usize("B"),
            rollouts_per_prompt: self.usize("r"),
            minibatch: self.usize("b"),
            grad_accum: self.usize("g"),
            epochs: self.usize("E"),
            inner_epochs: self.usize("e"),
            max_prompt_len: self.usize("L_p"),
            max_len: self.usize("L_c"),
            tau: self.f64("tau"),
            beta: self.f64("beta"),
            gamma: self.f64("gamma"),
            lam: self.f64("lam"),
            eps_clip: self.f64("eps_clip"),
            alpha: self.f64("alpha"),
            eta: self.f64("eta"),
            warmup_fraction: self.f64("warmup"),
            adam: self.adam(),
            grad_clip_norm: self.f64("clip"),
            trunc_penalty: self.f64("trunc_penalty"),
            seed: self.u64("seed"),
            forward_mode,
            max_steps: self.optional_steps(),
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_library_configs() {
        let c = Config::resolve(ppo_defaults(), None, &[], None).unwrap();
        assert_eq!(c.ppo_config().unwrap(), PpoConfig::default());
        let c = Config::resolve(dpo_defaults(), None, &[], None).unwrap();
        assert_eq!(c.dpo_config(), DpoConfig::default());
        let c = Config::resolve(rm_defaults(), None, &[], None).unwrap();
        assert_eq!(c.train_config(), TrainConfig::reward_defaults());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "beta = 0.1\nB = 16\nb = 4\nforward_mode = \"minibatch\"\n").unwrap();
        let c = Config::resolve(ppo_defaults(), Some(&path), &["beta=0.025".into(), "eta=1".into()], Some(9)).unwrap();
        let p = c.ppo_config().unwrap();
        assert_eq!(p.beta, 0.025);
        assert_eq!(p.batch_prompts, 16);
        assert_eq!(p.eta, 1.0);
        assert_eq!(p.seed, 9);
        assert_eq!(p.forward_mode, ForwardMode::Minibatch);
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        let err = Config::resolve(ppo_defaults(), None, &["kl_target=1".into()], None).unwrap_err();
        assert!(err.to_string().contains("kl_target"));
        let err = Config::resolve(ppo_defaults(), None, &["B=\"many\"".into()], None).unwrap_err();
        assert!(err.to_string().contains("`B`"));
        let err = Config::resolve(ppo_defaults(), None, &["B=-3".into()], None).unwrap_err();
        assert!(err.to_string().contains("`B`"));
    }

    #[test]
    fn round_trip() {
        let c = Config::resolve(ppo_defaults(), None, &["beta=0.0325".into(), "max_steps=7".into()], None).unwrap();
        let again = Config::parse(ppo_defaults(), &c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.ppo_config().unwrap(), c.ppo_config().unwrap());
    }
}
