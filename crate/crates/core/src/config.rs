//! Flat `key = value` configuration files for [`SimConfig`].
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::SimConfig;
use crate::tensor::NormOrder;

/// Every recognised key, in the order [`SimConfig::to_config_string`] writes them.
pub const KEYS: &[&str] = &[
    "k_clients",
    "fraction",
    "rounds",
    "strategy",
    "epsilon",
    "norm_order",
    "batch_size",
    "local_epochs",
    "learning_rate",
    "momentum",
    "clip_norm",
    "dp_enabled",
    "dp_beta",
    "dp_sigma",
    "vocab_size",
    "embed_dim",
    "hidden_dim",
    "num_layers",
    "tied",
    "bptt_len",
    "init_scale",
    "train_path",
    "valid_path",
    "test_path",
    "block_len",
    "master_seed",
    "ppl_threshold",
    "threshold_split",
    "eval_every",
    "eval_batch_size",
    "out_dir",
    "export_attention",
    "precision",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn opt(v: &Option<impl ToString>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

impl SimConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k_clients" => self.k_clients = parse(key, v)?,
            "fraction" => self.fraction = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "strategy" => self.aggregator.strategy = v.parse()?,
            "epsilon" => self.aggregator.epsilon = parse(key, v)?,
            "norm_order" => self.aggregator.norm_order = NormOrder::from_p(parse(key, v)?).map_err(|e| Error::Config(e.to_string()))?,
            "batch_size" => self.client.batch_size = parse(key, v)?,
            "local_epochs" => self.client.local_epochs = parse(key, v)?,
            "learning_rate" => self.client.learning_rate = parse(key, v)?,
            "momentum" => self.client.momentum = parse(key, v)?,
            "clip_norm" => self.client.clip_norm = parse(key, v)?,
            "dp_enabled" => self.dp.enabled = parse_bool(key, v)?,
            "dp_beta" => self.dp.beta_mag = parse(key, v)?,
            "dp_sigma" => self.dp.sigma = parse(key, v)?,
            "vocab_size" => self.model.vocab_size = parse(key, v)?,
            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "num_layers" => self.model.num_layers = parse(key, v)?,
            "tied" => self.model.tied = parse_bool(key, v)?,
            "bptt_len" => self.model.bptt_len = parse(key, v)?,
            "init_scale" => self.model.init_scale = parse(key, v)?,
            "train_path" => self.train_path = PathBuf::from(v),
            "valid_path" => self.valid_path = PathBuf::from(v),
            "test_path" => self.test_path = PathBuf::from(v),
            "block_len" => self.block_len = parse(key, v)?,
            "master_seed" => self.master_seed = parse(key, v)?,
            "ppl_threshold" => {
                self.ppl_threshold = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "threshold_split" => self.threshold_split = v.parse()?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "out_dir" => {
                self.out_dir = match v {
                    "" | "none" => None,
                    _ => Some(PathBuf::from(v)),
                }
            }
            "export_attention" => self.export_attention = parse_bool(key, v)?,
            "precision" => self.precision = v.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e.root())))?;
        }
        Ok(cfg)
    }

    /// Reads a config file. Relative corpus and output paths resolve
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.train_path, &mut cfg.valid_path, &mut cfg.test_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(out) = cfg.out_dir.as_mut() {
                if out.is_relative() {
                    *out = base.join(&*out);
                }
            }
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "k_clients" => self.k_clients.to_string(),
            "fraction" => self.fraction.to_string(),
            "rounds" => self.rounds.to_string(),
            "strategy" => self.aggregator.strategy.to_string(),
            "epsilon" => self.aggregator.epsilon.to_string(),
            "norm_order" => self.aggregator.norm_order.p().to_string(),
            "batch_size" => self.client.batch_size.to_string(),
            "local_epochs" => self.client.local_epochs.to_string(),
            "learning_rate" => self.client.learning_rate.to_string(),
            "momentum" => self.client.momentum.to_string(),
            "clip_norm" => self.client.clip_norm.to_string(),
            "dp_enabled" => self.dp.enabled.to_string(),
            "dp_beta" => self.dp.beta_mag.to_string(),
            "dp_sigma" => self.dp.sigma.to_string(),
            "vocab_size" => self.model.vocab_size.to_string(),
            "embed_dim" => self.model.embed_dim.to_string(),
            "hidden_dim" => self.model.hidden_dim.to_string(),
            "num_layers" => self.model.num_layers.to_string(),
            "tied" => self.model.tied.to_string(),
            "bptt_len" => self.model.bptt_len.to_string(),
            "init_scale" => self.model.init_scale.to_string(),
            "train_path" => self.train_path.display().to_string(),
            "valid_path" => self.valid_path.display().to_string(),
            "test_path" => self.test_path.display().to_string(),
            "block_len" => self.block_len.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "ppl_threshold" => opt(&self.ppl_threshold),
            "threshold_split" => self.threshold_split.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "out_dir" => self.out_dir.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            "export_attention" => self.export_attention.to_string(),
            "precision" => self.precision.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Every field in config-file syntax.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("KEYS are all known"));
        }
        s
    }
}
