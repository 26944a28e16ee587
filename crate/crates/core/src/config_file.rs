//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`EncoderConfig`] and [`TrainingConfig`],
//! plus `text_seed`. Blank lines and `#` comments are ignored. Missing keys
//! keep their defaults; `preset = desk | tiny | full` (first, if present)
//! selects the starting point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::training::TrainingConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub text_seed: u64,
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_layers(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse("cross_attn_layers", s))
        .collect()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let encoder = match name {
            "desk" => EncoderConfig::desk(),
            "tiny" => EncoderConfig::tiny(),
            "full" => EncoderConfig::full_scale(),
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        let training = if name == "full" {
            TrainingConfig::full_scale()
        } else {
            TrainingConfig::default()
        };
        Ok(Self {
            encoder,
            training,
            text_seed: 0,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (e, t) = (&mut self.encoder, &mut self.training);
        match key {
            "image_size" => e.image_size = parse(key, value)?,
            "patch_size" => e.patch_size = parse(key, value)?,
            "d_model" => e.d_model = parse(key, value)?,
            "d_joint" => e.d_joint = parse(key, value)?,
            "n_layers" => e.n_layers = parse(key, value)?,
            "n_heads" => e.n_heads = parse(key, value)?,
            "n_prompts" => e.n_prompts = parse(key, value)?,
            "cross_attn_layers" => e.cross_attn_layers = parse_layers(value)?,
            "init_seed" => e.init_seed = parse(key, value)?,
            "margin" => t.margin = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "negative_mining" => t.negative_mining = value.parse()?,
            "threshold_init" => t.threshold_init = parse(key, value)?,
            "threshold_gate_steepness" => t.threshold_gate_steepness = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "text_seed" => self.text_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().position(|(k, _)| k == "preset") {
            Some(i) => Self::preset(&pairs.remove(i).1)?,
            None => Self::default(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.encoder.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::parse(&text)
    }

    /// Text that [`RunConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let (e, t) = (&self.encoder, &self.training);
        let layers: Vec<String> = e.cross_attn_layers.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("image_size", e.image_size.to_string());
        kv("patch_size", e.patch_size.to_string());
        kv("d_model", e.d_model.to_string());
        kv("d_joint", e.d_joint.to_string());
        kv("n_layers", e.n_layers.to_string());
        kv("n_heads", e.n_heads.to_string());
        kv("n_prompts", e.n_prompts.to_string());
        kv("cross_attn_layers", layers.join(","));
        kv("init_seed", e.init_seed.to_string());
        kv("margin", t.margin.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("epochs", t.epochs.to_string());
        kv("negative_mining", t.negative_mining.to_string());
        kv("threshold_init", t.threshold_init.to_string());
        kv("threshold_gate_steepness", t.threshold_gate_steepness.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("seed", t.seed.to_string());
        kv("text_seed", self.text_seed.to_string());
        s
    }
}
