//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. A `profile` key, wherever it
//! appears, is applied first and the remaining keys override it. Unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::SplitRatios;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("unknown profile {0:?} (expected pems04, pems08 or seattle)")]
    UnknownProfile(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    Value {
        key: String,
        value: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// A training configuration plus run-level file settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub log_wall_time: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: "pems04".into(),
            dataset: None,
            out_dir: PathBuf::from("out"),
            log_wall_time: false,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "profile",
    "dataset",
    "out_dir",
    "input_len",
    "horizon",
    "embed_dim",
    "ffn_dim",
    "heads",
    "layers",
    "batch_size",
    "micro_batch",
    "lr",
    "milestones",
    "decay",
    "patience",
    "huber_delta",
    "mask_ratio",
    "subgraph_size",
    "seed",
    "max_epochs",
    "folding",
    "mask_strategy",
    "split",
    "log_wall_time",
    "parallel",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn from_profile(name: &str) -> Result<Self, ConfigError> {
        let train = TrainConfig::profile(name).ok_or_else(|| ConfigError::UnknownProfile(name.into()))?;
        Ok(Self {
            profile: name.into(),
            train,
            ..Self::default()
        })
    }

    /// Parses config text into `(line, key, value)` triples.
    pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.into(),
                });
            }
            pairs.push((i + 1, k.to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    /// Builds a config from pairs: profile first, then every other key in
    /// order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self, ConfigError> {
        let profile = pairs
            .clone()
            .into_iter()
            .filter(|(k, _)| *k == "profile")
            .last()
            .map(|(_, v)| v)
            .unwrap_or("pems04");
        let mut cfg = Self::from_profile(profile)?;
        for (k, v) in pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let pairs = Self::parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(_, k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Applies one override. `profile` resets every training setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "profile" => {
                let fresh = Self::from_profile(value)?;
                self.profile = fresh.profile;
                self.train = TrainConfig {
                    seed: self.train.seed,
                    ..fresh.train
                };
            }
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "input_len" => t.input_len = parse(key, value)?,
            "horizon" => t.horizon = parse(key, value)?,
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "ffn_dim" => t.ffn_dim = parse(key, value)?,
            "heads" => t.heads = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "micro_batch" => t.micro_batch = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "milestones" => t.milestones = parse_list(key, value)?,
            "decay" => t.decay = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "huber_delta" => t.huber_delta = parse(key, value)?,
            "mask_ratio" => t.mask_ratio = parse(key, value)?,
            "subgraph_size" => t.subgraph_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "folding" => t.folding = parse(key, value)?,
            "mask_strategy" => t.mask_strategy = parse(key, value)?,
            "split" => {
                let parts: Vec<f64> = parse_list(key, value)?;
                if parts.len() != 3 {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        msg: "expected train,val,test fractions".into(),
                    });
                }
                t.split = SplitRatios {
                    train: parts[0],
                    val: parts[1],
                    test: parts[2],
                };
            }
            "log_wall_time" => self.log_wall_time = parse(key, value)?,
            "parallel" => t.parallelism = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(ConfigError::Invalid)?;
        let s = self.train.split;
        if [s.train, s.val, s.test].iter().any(|f| !(0.0..=1.0).contains(f)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "split fractions {},{},{} must be in [0, 1] and sum to 1",
                s.train, s.val, s.test
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form `from_text` accepts.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("profile", self.profile.clone());
        if let Some(d) = &self.dataset {
            put("dataset", d.display().to_string());
        }
        put("out_dir", self.out_dir.display().to_string());
        put("input_len", t.input_len.to_string());
        put("horizon", t.horizon.to_string());
        put("embed_dim", t.embed_dim.to_string());
        put("ffn_dim", t.ffn_dim.to_string());
        put("heads", t.heads.to_string());
        put("layers", t.layers.to_string());
        put("batch_size", t.batch_size.to_string());
        put("micro_batch", t.micro_batch.to_string());
        put("lr", t.lr.to_string());
        put(
            "milestones",
            t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        put("decay", t.decay.to_string());
        put("patience", t.patience.to_string());
        put("huber_delta", t.huber_delta.to_string());
        put("mask_ratio", t.mask_ratio.to_string());
        put("subgraph_size", t.subgraph_size.to_string());
        put("seed", t.seed.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("folding", t.folding.as_str().into());
        put("mask_strategy", t.mask_strategy.as_str().into());
        put("split", format!("{},{},{}", t.split.train, t.split.val, t.split.test));
        put("log_wall_time", self.log_wall_time.to_string());
        put(
            "parallel",
            (t.parallelism == crate::exec::Parallelism::Parallel).to_string(),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Folding;

    #[test]
    fn profile_applies_before_other_keys() {
        let cfg = RunConfig::from_text("embed_dim = 16\n# note\nprofile = pems08\n").unwrap();
        assert_eq!(cfg.profile, "pems08");
        assert_eq!(cfg.train.embed_dim, 16);
        assert_eq!(cfg.train.subgraph_size, 30);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_text("colour = red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("heads = four"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::from_text("just text"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("profile = la"), Err(ConfigError::UnknownProfile(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::from_profile("seattle").unwrap();
        cfg.set_override("folding=sf").unwrap();
        cfg.set_override("milestones = 3, 9").unwrap();
        cfg.set_override("split=0.5,0.25,0.25").unwrap();
        cfg.set_override("lr=0.003").unwrap();
        cfg.dataset = Some("data/x.csv".into());
        assert_eq!(cfg.train.folding, Folding::Spatial);
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        for k in KEYS {
            assert!(cfg.to_text().contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn validation_catches_bad_split() {
        let mut cfg = RunConfig::default();
        cfg.set_override("split=0.8,0.3,0.1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
