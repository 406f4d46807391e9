//! Run configuration, read from a TOML file of dotted `section.key = value`
//! lines (`encoder.k = 8`, `time.beta_range = [0.5, 2.0]`, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Neighbors sampled per endpoint.
    pub k: usize,
    /// Consecutive neighbor entries grouped into one encoder token.
    pub patch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the harmonic time encoding (even).
    pub time_dims: usize,
    /// Width of the co-occurrence projection.
    pub count_dims: usize,
    pub omega_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 8,
            patch: 1,
            hidden: 32,
            layers: 2,
            heads: 4,
            time_dims: 8,
            count_dims: 16,
            omega_max: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub alpha: f64,
    pub shuffle: bool,
    pub beta_range: [f64; 2],
    pub gamma_range: [f64; 2],
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            alpha: 1.0,
            shuffle: true,
            beta_range: [0.5, 2.0],
            gamma_range: [0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Longest evolving sequence (context triples + target).
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            heads: 4,
            hidden: 32,
            max_len: 32,
        }
    }
}

impl DecoderConfig {
    /// The published model size: 12 layers, 8 heads, hidden 128, 120 triples.
    pub fn full_scale() -> Self {
        DecoderConfig {
            layers: 12,
            heads: 8,
            hidden: 128,
            max_len: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Evolving sequences per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warm-up.
    pub warmup: f64,
    pub seed: u64,
    pub dropout: f64,
    /// Cap on positive edges drawn per domain per epoch (0 = all).
    pub edges_per_epoch: usize,
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup: 0.05,
            seed: 0,
            dropout: 0.0,
            edges_per_epoch: 0,
            split: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub time: TimeConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(Error::Config(m));
        if e.k == 0 || e.patch == 0 || e.k % e.patch != 0 {
            return bad(format!("encoder.patch ({}) must divide encoder.k ({})", e.patch, e.k));
        }
        if e.time_dims == 0 || e.time_dims % 2 != 0 {
            return bad(format!("encoder.time_dims must be even, got {}", e.time_dims));
        }
        if e.heads == 0 || e.hidden % e.heads != 0 {
            return bad(format!("encoder.hidden {} not divisible by {} heads", e.hidden, e.heads));
        }
        let d = &self.decoder;
        if d.heads == 0 || d.hidden % d.heads != 0 {
            return bad(format!("decoder.hidden {} not divisible by {} heads", d.hidden, d.heads));
        }
        if d.max_len == 0 {
            return bad("decoder.max_len must be at least 1".into());
        }
        let t = &self.time;
        if t.alpha <= 0.0 {
            return bad(format!("time.alpha must be positive, got {}", t.alpha));
        }
        if t.beta_range[0] <= 0.0 || t.beta_range[1] < t.beta_range[0] {
            return bad(format!("time.beta_range must be a positive interval, got {:?}", t.beta_range));
        }
        if t.gamma_range[1] < t.gamma_range[0] {
            return bad(format!("time.gamma_range is empty: {:?}", t.gamma_range));
        }
        let tr = &self.train;
        if tr.epochs == 0 || tr.batch == 0 {
            return bad("train.epochs and train.batch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&tr.dropout) {
            return bad(format!("train.dropout must be in [0, 1), got {}", tr.dropout));
        }
        if !(0.0..=1.0).contains(&tr.warmup) {
            return bad(format!("train.warmup must be in [0, 1], got {}", tr.warmup));
        }
        Ok(())
    }
}
