//! Training configuration and its flat `key=value` file form.
//!
//! Documented keys (all optional, defaults in parentheses):
//!
//! | key | meaning |
//! |-----|---------|
//! | `objective` | `ntp` or `mtp` (`ntp`) |
//! | `mtp.window` | MTP targets per context, 1..=5 (5) |
//! | `mtp.half_life_seconds` | weight half-life (3600) |
//! | `mtp.horizon_seconds` | look-ahead for MTP targets (172800) |
//! | `mtp.reward_weighting` | `unit` or `reward` (`unit`) |
//! | `decoder.mode` | `full` or `projected` (`projected`) |
//! | `decoder.sampling` | `none` or a fraction in (0, 1] (0.01) |
//! | `mask.prob` | collaborative-embedding mask probability (0) |
//! | `mask.side` | `input`, `output` or `either-uniform` |
//! | `lr`, `beta1`, `beta2`, `eps`, `weight_decay` | AdamW (3e-3, 0.9, 0.999, 1e-8, 0.01) |
//! | `warmup_steps`, `min_lr_ratio`, `grad_clip` | schedule and clipping (20, 0.1, 1.0) |
//! | `batch_size`, `steps`, `eval_every`, `seed` | loop (16, 500, 100, 0) |
//! | `model.layers`, `model.width`, `model.heads`, `model.seq_len`, `model.embed_dim`, `model.ffn_mult`, `model.z_dim`, `model.precision` | architecture |

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Precision};
use crate::cold_start::{MaskSide, MaskingConfig};
use crate::decoder::{DecoderConfig, Sampling};
use crate::error::{config_err, Result};
use crate::model::Objective;
use crate::mtp::MtpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub mtp: MtpConfig,
    pub decoder: DecoderConfig,
    pub masking: MaskingConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ntp,
            mtp: MtpConfig::default(),
            decoder: DecoderConfig::default(),
            masking: MaskingConfig::disabled(),
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 20,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            batch_size: 16,
            steps: 500,
            eval_every: 100,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return config_err(format!("{name} must be positive, got {v}"));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.mtp.validate()?;
        self.masking.validate()?;
        self.decoder.validate(model.vocab)?;
        if self.decoder.mode != model.decoder_mode {
            return config_err("decoder mode differs between model and training configuration");
        }
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        positive("grad_clip", self.grad_clip)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return config_err("weight_decay must be nonnegative and min_lr_ratio in [0, 1]");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warmup, then cosine decay to `min_lr_ratio · lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps.min(self.steps);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().or_else(|_| config_err(format!("{key}: expected a number, got '{v}'")))
        };
        let int = |v: &str| -> Result<usize> {
            let x = num(v)?;
            if x < 0.0 || x.fract() != 0.0 {
                return config_err(format!("{key}: expected a nonnegative integer, got '{v}'"));
            }
            Ok(x as usize)
        };
        match key {
            "objective" => self.objective = value.parse()?,
            "mtp.window" => self.mtp.window = int(value)?,
            "mtp.half_life_seconds" => self.mtp.half_life = num(value)?,
            "mtp.horizon_seconds" => self.mtp.horizon = int(value)? as i64,
            "mtp.reward_weighting" => self.mtp.reward_weighting = value.parse()?,
            "decoder.mode" => self.decoder.mode = value.parse()?,
            "decoder.sampling" => {
                self.decoder.sampling =
                    if value == "none" { Sampling::None } else { Sampling::UniformFraction(num(value)?) }
            }
            "mask.prob" => self.masking.p_mask = num(value)?,
            "mask.side" => self.masking.side = value.parse::<MaskSide>()?,
            "lr" => self.lr = num(value)?,
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "eps" => self.eps = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "warmup_steps" => self.warmup_steps = int(value)?,
            "min_lr_ratio" => self.min_lr_ratio = num(value)?,
            "grad_clip" => self.grad_clip = num(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "steps" => self.steps = int(value)?,
            "eval_every" => self.eval_every = int(value)?,
            "seed" => self.seed = int(value)? as u64,
            _ => return config_err(format!("unknown training key '{key}'")),
        }
        Ok(())
    }

    /// Every key in documented order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let sampling = match self.decoder.sampling {
            Sampling::None => "none".to_string(),
            Sampling::UniformFraction(f) => f.to_string(),
        };
        let s = |x: &dyn ToString| x.to_string();
        vec![
            ("objective".into(), serde_plain(&self.objective)),
            ("mtp.window".into(), s(&self.mtp.window)),
            ("mtp.half_life_seconds".into(), s(&self.mtp.half_life)),
            ("mtp.horizon_seconds".into(), s(&self.mtp.horizon)),
            ("mtp.reward_weighting".into(), serde_plain(&self.mtp.reward_weighting)),
            ("decoder.mode".into(), serde_plain(&self.decoder.mode)),
            ("decoder.sampling".into(), sampling),
            ("mask.prob".into(), s(&self.masking.p_mask)),
            ("mask.side".into(), serde_plain(&self.masking.side)),
            ("lr".into(), s(&self.lr)),
            ("beta1".into(), s(&self.beta1)),
            ("beta2".into(), s(&self.beta2)),
            ("eps".into(), s(&self.eps)),
            ("weight_decay".into(), s(&self.weight_decay)),
            ("warmup_steps".into(), s(&self.warmup_steps)),
            ("min_lr_ratio".into(), s(&self.min_lr_ratio)),
            ("grad_clip".into(), s(&self.grad_clip)),
            ("batch_size".into(), s(&self.batch_size)),
            ("steps".into(), s(&self.steps)),
            ("eval_every".into(), s(&self.eval_every)),
            ("seed".into(), s(&self.seed)),
        ]
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Applies a `model.*` key to an architecture.
pub fn set_model_key(model: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let int = || -> Result<usize> {
        value.parse::<usize>().or_else(|_| config_err(format!("{key}: expected an integer, got '{value}'")))
    };
    match key {
        "model.layers" => model.layers = int()?,
        "model.width" => model.width = int()?,
        "model.heads" => model.heads = int()?,
        "model.seq_len" => model.seq_len = int()?,
        "model.embed_dim" => model.embed_dim = int()?,
        "model.ffn_mult" => model.ffn_mult = int()?,
        "model.z_dim" => model.z_dim = int()?,
        "model.precision" => {
            model.precision = match value {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return config_err(format!("unknown precision '{value}'")),
            }
        }
        _ => return config_err(format!("unknown model key '{key}'")),
    }
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("line {}: expected key=value", n + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies parsed settings: `model.*` keys to `model`, the rest to `train`.
/// `decoder.mode` is applied to both.
pub fn apply_kv(pairs: &[(String, String)], model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (k, v) in pairs {
        if k.starts_with("model.") {
            set_model_key(model, k, v)?;
        } else {
            train.set(k, v)?;
            if k == "decoder.mode" {
                model.decoder_mode = train.decoder.mode;
            }
        }
    }
    Ok(())
}

pub fn render_kv(model: &ModelConfig, train: &TrainConfig) -> String {
    let precision = match model.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let mut out = String::new();
    for (k, v) in [
        ("model.layers", model.layers.to_string()),
        ("model.width", model.width.to_string()),
        ("model.heads", model.heads.to_string()),
        ("model.seq_len", model.seq_len.to_string()),
        ("model.embed_dim", model.embed_dim.to_string()),
        ("model.ffn_mult", model.ffn_mult.to_string()),
        ("model.z_dim", model.z_dim.to_string()),
        ("model.precision", precision.to_string()),
    ] {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in train.to_kv() {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}
