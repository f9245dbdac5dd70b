//! Run configuration: flat `key=value` text holding the run keys below plus
//! every model key.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | initialisation, shuffling and augmentation seed |
//! | `epochs` | 30 | maximum epochs |
//! | `batch_size` | 4 | samples accumulated per optimiser step |
//! | `lr` | 1e-3 | initial learning rate |
//! | `lr_gamma` | `30^(-1/epochs)` | per-epoch decay factor |
//! | `beta1`, `beta2`, `adam_eps` | 0.9, 0.999, 1e-8 | AdamW moments |
//! | `weight_decay` | 1e-2 | decoupled decay |
//! | `clip_norm` | 1.0 | global gradient-norm cap, 0 disables |
//! | `augment` | true | on-the-fly augmentation |
//! | `crop` | none | training crop `h,w` |
//! | `window` | none | validation sliding window `h,w`, none = whole image |
//! | `eval_every` | 1 | epochs between validations |
//! | `checkpoint_every` | 1 | epochs between checkpoints |
//! | `early_stop_dsc` | none | stop once validation DSC reaches this value |

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::optim::{gamma_for, AdamWConfig};
use crate::config::{join, write_kv, KvReader};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Total learning-rate reduction over a run when `lr_gamma` is not given.
pub const DEFAULT_LR_DECAY_FACTOR: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub adam: AdamWConfig,
    pub clip_norm: f64,
    pub augment: bool,
    pub crop: Option<(usize, usize)>,
    pub window: Option<(usize, usize)>,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub early_stop_dsc: Option<f64>,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            lr_gamma: gamma_for(DEFAULT_LR_DECAY_FACTOR, 30),
            adam: AdamWConfig::default(),
            clip_norm: 1.0,
            augment: true,
            crop: None,
            window: None,
            eval_every: 1,
            checkpoint_every: 1,
            early_stop_dsc: None,
            model: ModelConfig::tiny(),
        }
    }
}

fn pair_to_string(p: Option<(usize, usize)>) -> String {
    p.map_or("none".into(), |(a, b)| join(&[a, b]))
}

fn read_pair(r: &mut KvReader, key: &str) -> Result<Option<(usize, usize)>> {
    match r.take_raw(key).as_deref() {
        None | Some("none") => Ok(None),
        Some(raw) => {
            let v: Vec<usize> = raw
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| Error::config(key, format!("`{raw}`: {e}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [a, b] if a > 0 && b > 0 => Ok(Some((a, b))),
                _ => Err(Error::config(key, format!("expected two positive values, got `{raw}`"))),
            }
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config("lr_gamma", "must be in (0, 1]"));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("eval_every", "intervals must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_kv();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("lr_gamma", self.lr_gamma.to_string());
        put("beta1", self.adam.beta1.to_string());
        put("beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("weight_decay", self.adam.weight_decay.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("augment", self.augment.to_string());
        put("crop", pair_to_string(self.crop));
        put("window", pair_to_string(self.window));
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("early_stop_dsc", self.early_stop_dsc.map_or("none".into(), |v| v.to_string()));
        m
    }

    pub fn to_text(&self) -> String {
        write_kv(&self.to_kv())
    }

    /// Parses a config; unknown keys are errors. Model keys start from
    /// [`ModelConfig::tiny`] defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let d = RunConfig::default();
        let epochs = r.get("epochs", d.epochs)?;
        let early = match r.take_raw("early_stop_dsc").as_deref() {
            None | Some("none") => None,
            Some(raw) => Some(raw.parse().map_err(|e| Error::config("early_stop_dsc", format!("`{raw}`: {e}")))?),
        };
        let model_defaults = ModelConfig::tiny().to_kv();
        let mut merged = model_defaults;
        let cfg = RunConfig {
            seed: r.get("seed", d.seed)?,
            epochs,
            batch_size: r.get("batch_size", d.batch_size)?,
            lr: r.get("lr", d.lr)?,
            lr_gamma: r.get("lr_gamma", gamma_for(DEFAULT_LR_DECAY_FACTOR, epochs))?,
            adam: AdamWConfig {
                beta1: r.get("beta1", d.adam.beta1)?,
                beta2: r.get("beta2", d.adam.beta2)?,
                eps: r.get("adam_eps", d.adam.eps)?,
                weight_decay: r.get("weight_decay", d.adam.weight_decay)?,
            },
            clip_norm: r.get("clip_norm", d.clip_norm)?,
            augment: r.get("augment", d.augment)?,
            crop: read_pair(&mut r, "crop")?,
            window: read_pair(&mut r, "window")?,
            eval_every: r.get("eval_every", d.eval_every)?,
            checkpoint_every: r.get("checkpoint_every", d.checkpoint_every)?,
            early_stop_dsc: early,
            model: {
                merged.extend(r.into_rest());
                let mut mr = KvReader::new(merged);
                let m = ModelConfig::from_reader(&mut mr)?;
                mr.finish()?;
                m
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            seed: 5,
            lr: 3e-4,
            crop: Some((48, 32)),
            early_stop_dsc: Some(0.95),
            model: ModelConfig {
                semantic_hw: (2, 2),
                ..ModelConfig::tiny()
            },
            ..Default::default()
        };
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = RunConfig::parse("epochs=10\nsemantic_hw=2,2\n").unwrap();
        assert_eq!(cfg.model.semantic_hw, (2, 2));
        assert_eq!(cfg.model.blocks, [1, 1, 1]);
        assert!((cfg.lr_gamma.powi(10) - 1.0 / 30.0).abs() < 1e-12);
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Config { field, .. }) if field == "bogus"));
        assert!(matches!(RunConfig::parse("batch_size=0"), Err(Error::Config { field, .. }) if field == "batch_size"));
        assert!(RunConfig::parse("crop=4").is_err());
    }
}
