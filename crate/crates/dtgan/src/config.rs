//! Flat `key = value` config files covering model, training, and evaluation
//! knobs. `#` starts a comment; unknown keys are an error; serialization
//! round-trips exactly.

use crate::domain::{validate_config, LossWeights, ModelConfig};
use crate::error::{DtganError, Result};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Classifier / embedding knobs used by the evaluation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub embed_dim: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub cls_blocks: usize,
    pub cls_width: usize,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub cls_batch: usize,
    pub grl_lambda: f64,
    pub cls_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            embed_dim: 16,
            probe_epochs: 6,
            probe_lr: 2e-3,
            cls_blocks: 8,
            cls_width: 12,
            cls_epochs: 6,
            cls_lr: 2e-3,
            cls_batch: 16,
            grl_lambda: 0.1,
            cls_seeds: 5,
        }
    }
}

/// Every tunable in one place: parsed from and serialized to the flat file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub(crate) const KNOWN_KEYS: &[&str] = &[
    "image_size",
    "latent_dim",
    "style_dim",
    "n_domains",
    "n_products",
    "bottleneck_channels",
    "fg_channels",
    "bottleneck_downsampling",
    "seed",
    "total_steps",
    "batch_size",
    "lr_g",
    "lr_d",
    "lr_e",
    "lr_m",
    "ema_decay",
    "checkpoint_every",
    "log_every",
    "train_seed",
    "lambda_sd",
    "lambda_d",
    "lambda_ds",
    "lambda_cyc",
    "lambda_fg",
    "lambda_bg",
    "lambda_r1",
    "ds_decay_steps",
    "embed_dim",
    "probe_epochs",
    "probe_lr",
    "cls_blocks",
    "cls_width",
    "cls_epochs",
    "cls_lr",
    "cls_batch",
    "grl_lambda",
    "cls_seeds",
];

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| DtganError::Config(format!("key {key}: expected an unsigned integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| DtganError::Config(format!("key {key}: expected an unsigned integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| DtganError::Config(format!("key {key}: expected a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(DtganError::Config(format!("key {key}: value must be finite")));
    }
    Ok(x)
}

impl FullConfig {
    /// Parse the flat text format. Unknown keys are rejected by name.
    pub fn parse(text: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DtganError::Config(format!(
                    "line {}: expected `key = value`, got {:?}",
                    lineno + 1,
                    raw
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(DtganError::Config(format!("unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(DtganError::Config(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value)?;
        }
        validate_config(cfg.model.clone())?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => self.model.image_size = parse_usize(key, v)?,
            "latent_dim" => self.model.latent_dim = parse_usize(key, v)?,
            "style_dim" => self.model.style_dim = parse_usize(key, v)?,
            "n_domains" => self.model.n_domains = parse_usize(key, v)?,
            "n_products" => self.model.n_products = parse_usize(key, v)?,
            "bottleneck_channels" => self.model.bottleneck_channels = parse_usize(key, v)?,
            "fg_channels" => self.model.fg_channels = parse_usize(key, v)?,
            "bottleneck_downsampling" => self.model.bottleneck_downsampling = parse_usize(key, v)?,
            "seed" => self.model.seed = parse_u64(key, v)?,
            "total_steps" => self.train.total_steps = parse_usize(key, v)?,
            "batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "lr_g" => self.train.lr_g = parse_f64(key, v)?,
            "lr_d" => self.train.lr_d = parse_f64(key, v)?,
            "lr_e" => self.train.lr_e = parse_f64(key, v)?,
            "lr_m" => self.train.lr_m = parse_f64(key, v)?,
            "ema_decay" => self.train.ema_decay = parse_f64(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_usize(key, v)?,
            "log_every" => self.train.log_every = parse_usize(key, v)?,
            "train_seed" => self.train.seed = parse_u64(key, v)?,
            "lambda_sd" => self.train.weights.lambda_sd = parse_f64(key, v)?,
            "lambda_d" => self.train.weights.lambda_d = parse_f64(key, v)?,
            "lambda_ds" => self.train.weights.lambda_ds = parse_f64(key, v)?,
            "lambda_cyc" => self.train.weights.lambda_cyc = parse_f64(key, v)?,
            "lambda_fg" => self.train.weights.lambda_fg = parse_f64(key, v)?,
            "lambda_bg" => self.train.weights.lambda_bg = parse_f64(key, v)?,
            "lambda_r1" => self.train.weights.lambda_r1 = parse_f64(key, v)?,
            "ds_decay_steps" => self.train.weights.ds_decay_steps = parse_usize(key, v)?,
            "embed_dim" => self.eval.embed_dim = parse_usize(key, v)?,
            "probe_epochs" => self.eval.probe_epochs = parse_usize(key, v)?,
            "probe_lr" => self.eval.probe_lr = parse_f64(key, v)?,
            "cls_blocks" => self.eval.cls_blocks = parse_usize(key, v)?,
            "cls_width" => self.eval.cls_width = parse_usize(key, v)?,
            "cls_epochs" => self.eval.cls_epochs = parse_usize(key, v)?,
            "cls_lr" => self.eval.cls_lr = parse_f64(key, v)?,
            "cls_batch" => self.eval.cls_batch = parse_usize(key, v)?,
            "grl_lambda" => self.eval.grl_lambda = parse_f64(key, v)?,
            "cls_seeds" => self.eval.cls_seeds = parse_usize(key, v)?,
            _ => unreachable!("key {key} validated against KNOWN_KEYS"),
        }
        Ok(())
    }

    /// Canonical serialization; `parse(to_text())` reproduces every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "latent_dim = {}", m.latent_dim);
        let _ = writeln!(s, "style_dim = {}", m.style_dim);
        let _ = writeln!(s, "n_domains = {}", m.n_domains);
        let _ = writeln!(s, "n_products = {}", m.n_products);
        let _ = writeln!(s, "bottleneck_channels = {}", m.bottleneck_channels);
        let _ = writeln!(s, "fg_channels = {}", m.fg_channels);
        let _ = writeln!(s, "bottleneck_downsampling = {}", m.bottleneck_downsampling);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "# training");
        let _ = writeln!(s, "total_steps = {}", t.total_steps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr_g = {}", t.lr_g);
        let _ = writeln!(s, "lr_d = {}", t.lr_d);
        let _ = writeln!(s, "lr_e = {}", t.lr_e);
        let _ = writeln!(s, "lr_m = {}", t.lr_m);
        let _ = writeln!(s, "ema_decay = {}", t.ema_decay);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "train_seed = {}", t.seed);
        let w = &t.weights;
        let _ = writeln!(s, "lambda_sd = {}", w.lambda_sd);
        let _ = writeln!(s, "lambda_d = {}", w.lambda_d);
        let _ = writeln!(s, "lambda_ds = {}", w.lambda_ds);
        let _ = writeln!(s, "lambda_cyc = {}", w.lambda_cyc);
        let _ = writeln!(s, "lambda_fg = {}", w.lambda_fg);
        let _ = writeln!(s, "lambda_bg = {}", w.lambda_bg);
        let _ = writeln!(s, "lambda_r1 = {}", w.lambda_r1);
        let _ = writeln!(s, "ds_decay_steps = {}", w.ds_decay_steps);
        let _ = writeln!(s, "# evaluation");
        let _ = writeln!(s, "embed_dim = {}", e.embed_dim);
        let _ = writeln!(s, "probe_epochs = {}", e.probe_epochs);
        let _ = writeln!(s, "probe_lr = {}", e.probe_lr);
        let _ = writeln!(s, "cls_blocks = {}", e.cls_blocks);
        let _ = writeln!(s, "cls_width = {}", e.cls_width);
        let _ = writeln!(s, "cls_epochs = {}", e.cls_epochs);
        let _ = writeln!(s, "cls_lr = {}", e.cls_lr);
        let _ = writeln!(s, "cls_batch = {}", e.cls_batch);
        let _ = writeln!(s, "grl_lambda = {}", e.grl_lambda);
        let _ = writeln!(s, "cls_seeds = {}", e.cls_seeds);
        s
    }

    pub fn load(path: &std::path::Path) -> Result<FullConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DtganError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Loss weights with the step-count-dependent default for the diversity
    /// decay window applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.train.weights.clone();
        if w.ds_decay_steps == 0 {
            w.ds_decay_steps = (self.train.total_steps / 2).max(1);
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_default() {
        let cfg = FullConfig::default();
        let text = cfg.to_text();
        let back = FullConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = FullConfig::parse("images = 32\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ok() {
        let cfg = FullConfig::parse("# hi\n\nimage_size = 16  # inline\n").unwrap();
        assert_eq!(cfg.model.image_size, 16);
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = FullConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate key"), "{err}");
    }

    #[test]
    fn model_invariants_checked_at_parse() {
        let err = FullConfig::parse("image_size = 30\n").unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
    }
}
