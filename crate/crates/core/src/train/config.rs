use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::synth::SceneParams;
use crate::tracker::{Tracker, TrackerConfig};
use crate::{Error, Result};

/// Optimization and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// Share of steps spent ramping up to `lr_max`.
    pub warmup_frac: f64,
    /// Starting learning rate is `lr_max / initial_div`.
    pub initial_div: f64,
    /// Final learning rate is `lr_max / final_div`.
    pub final_div: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub use_obj_loss: bool,
    pub use_ctx_attention: bool,
    pub loss_on_occluded: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            lr_max: 1e-3,
            warmup_frac: 0.05,
            initial_div: 25.0,
            final_div: 1e4,
            gamma: 0.8,
            alpha: 0.15,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            use_obj_loss: true,
            use_ctx_attention: true,
            loss_on_occluded: false,
            checkpoint_every: 500,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            steps: 300_000,
            lr_max: 5e-3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("train.steps and train.batch_size must be >= 1");
        }
        if !(self.lr_max > 0.0) || !(self.initial_div >= 1.0) || !(self.final_div >= 1.0) {
            return bad("learning-rate settings must be positive with divisors >= 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("train.warmup_frac must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma must lie in (0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("train.alpha must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight decay and gradient clip must be >= 0");
        }
        Ok(())
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    /// Geometry and motion of synthetic clips.
    pub data: SceneParams,
}

impl Config {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let s = self.encoder.downsample;
        if self.data.height % s != 0 || self.data.width % s != 0 {
            return Err(Error::config(format!(
                "frame size {}x{} not divisible by encoder stride {}",
                self.data.width, self.data.height, s
            )));
        }
        let coarsest = 1usize << (self.tracker.corr_scales - 1);
        if self.data.height / s < coarsest || self.data.width / s < coarsest {
            return Err(Error::config("feature map too small for the correlation pyramid"));
        }
        Ok(())
    }

    /// Encoder settings with the ablation switch applied.
    pub fn effective_encoder(&self) -> EncoderConfig {
        let mut e = self.encoder.clone();
        e.use_attention = e.use_attention && self.train.use_ctx_attention;
        e
    }

    pub fn tracker(&self) -> Result<Tracker> {
        Tracker::new(self.effective_encoder(), self.tracker.clone())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` (or the desk defaults when `None`) and applies
    /// `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {}", p.display(), e)))?,
            None => Self::desk().to_toml(),
        };
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| Error::config(format!("config: {}", e)))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Sets `a.b.c=value`; the value is parsed as a TOML literal, falling back
/// to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{}` is not key=value", assignment)))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{}`", key)));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{}` descends into a non-table", key)))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override `{}` descends into a non-table", key)))?;
    let last = parts[parts.len() - 1];
    if let (Some(old), toml::Value::Integer(i)) = (table.get(last), &value) {
        // `lr_max=1` should still be a float
        if old.is_float() {
            table.insert(last.to_string(), toml::Value::Float(*i as f64));
            return Ok(());
        }
    }
    table.insert(last.to_string(), value);
    Ok(())
}
