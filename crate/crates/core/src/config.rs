//! Run configuration: presets, flat `key = value` files, overrides and digests.
//!
//! Every setting has a dotted key such as `model.router.top_k`. A config file
//! is TOML restricted to those keys (tables or dotted keys both work); later
//! sources override earlier ones: preset, file, `--set key=value` overrides,
//! then the `MOFME_SEED` environment variable.
//!
//! The run digest is the SHA-256 of the sorted `key=value` lines of every
//! setting except `out_dir`; the model digest covers `model.*` keys only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::ExpertMode;
use crate::losses::{LossWeights, Objective};
use crate::model::ModelConfig;
use crate::routing::RouterMode;
use crate::train::{equal_param_dense, OptimConfig, TrainConfig};

pub const SEED_ENV: &str = "MOFME_SEED";

pub const PRESETS: [&str; 6] = ["baseline", "moe", "moe+uar", "fme", "mofme", "baseline-matched"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_lb: f64,
    pub lambda_uc: f64,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_lb: w.lambda_lb,
            lambda_uc: w.lambda_uc,
            objective: Objective::Mofme,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_lb: self.lambda_lb,
            lambda_uc: self.lambda_uc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Directory holding `manifest.json` and the split files.
    pub path: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: "data".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub type FlatConfig = BTreeMap<String, toml::Value>;

fn flatten_into(prefix: &str, v: &toml::Value, out: &mut FlatConfig) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

pub fn flatten(v: &toml::Value) -> FlatConfig {
    let mut out = FlatConfig::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &FlatConfig) -> Result<toml::Value> {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut table = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("config key {key} conflicts with a value at {p}")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(toml::Value::Table(root))
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn render(v: &toml::Value) -> String {
    match v {
        // Always keep a decimal point or exponent so floats stay floats on re-read.
        toml::Value::Float(f) => {
            let s = format!("{f:?}");
            if s.contains(['.', 'e', 'E']) || !f.is_finite() {
                s
            } else {
                format!("{s}.0")
            }
        }
        other => other.to_string(),
    }
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha(lines: &str) -> [u8; 32] {
    Sha256::digest(lines.as_bytes()).into()
}

fn canonical_lines(flat: &FlatConfig, keep: impl Fn(&str) -> bool) -> String {
    flat.iter()
        .filter(|(k, _)| keep(k))
        .map(|(k, v)| format!("{k}={}\n", render(v)))
        .collect()
}

/// Digest of a model configuration alone, as stored in checkpoints.
pub fn model_digest(model: &ModelConfig) -> Result<[u8; 32]> {
    let v = toml::Value::try_from(model).map_err(|e| Error::config(format!("cannot serialize model config: {e}")))?;
    let mut flat = FlatConfig::new();
    flatten_into("model", &v, &mut flat);
    Ok(sha(&canonical_lines(&flat, |_| true)))
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let (mode, router, objective) = match name {
            "baseline" | "baseline-matched" => (ExpertMode::Dense, RouterMode::Linear, Objective::Moe),
            "moe" => (ExpertMode::Moe, RouterMode::Linear, Objective::Moe),
            "moe+uar" => (ExpertMode::Moe, RouterMode::UarCalibrated, Objective::Mofme),
            "fme" => (ExpertMode::Fme, RouterMode::Linear, Objective::Moe),
            "mofme" => (ExpertMode::Fme, RouterMode::UarCalibrated, Objective::Mofme),
            _ => {
                return Err(Error::config(format!(
                    "unknown preset {name:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        c.model.expert_mode = mode;
        c.model.router.mode = router;
        c.loss.objective = objective;
        if name == "baseline-matched" {
            c.model = equal_param_dense(&RunConfig::preset("mofme")?.model)?;
        }
        c.out_dir = format!("runs/{}", name.replace('+', "-"));
        Ok(c)
    }

    pub fn to_flat(&self) -> FlatConfig {
        flatten(&toml::Value::try_from(self).expect("config serializes"))
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let v = unflatten(flat)?;
        let cfg: RunConfig = v
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid config: {}", e.message())))?;
        let known = cfg.to_flat();
        if let Some(k) = flat.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::config(format!("unknown config key {k}")));
        }
        Ok(cfg)
    }

    /// Applies the keys of a TOML document on top of `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config file: {}", e.message())))?;
        let mut flat = self.to_flat();
        flat.extend(flatten(&toml::Value::Table(doc)));
        Self::from_flat(&flat)
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut flat = self.to_flat();
        for s in sets {
            let s = s.as_ref();
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
            let k = k.trim();
            if !flat.contains_key(k) {
                return Err(Error::config(format!("unknown config key {k}")));
            }
            flat.insert(k.to_string(), parse_value(v));
        }
        Self::from_flat(&flat)
    }

    /// Replaces the seed with `MOFME_SEED` when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse::<i64>()
                .ok()
                .and_then(|v| u64::try_from(v).ok())
                .ok_or_else(|| Error::config(format!("{SEED_ENV}={s:?} is not a nonnegative 64-bit integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed must fit in a signed 64-bit integer"));
        }
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        if self.loss.objective == Objective::Mofme
            && self.model.expert_mode != ExpertMode::Dense
            && !self.model.router.mode.is_uar()
            && self.loss.lambda_uc != 0.0
        {
            log::warn!("objective mofme without an uncertainty-aware router: the uncertainty term is zero");
        }
        Ok(())
    }

    /// Sorted `key = value` lines; parses back to the same config.
    pub fn to_toml_string(&self) -> String {
        self.to_flat()
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", render(v)))
            .collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        sha(&canonical_lines(&self.to_flat(), |k| k != "out_dir"))
    }

    pub fn digest_hex(&self) -> String {
        digest_hex(&self.digest())
    }

    pub fn model_digest(&self) -> [u8; 32] {
        model_digest(&self.model).expect("model config serializes")
    }

    pub fn model_digest_hex(&self) -> String {
        digest_hex(&self.model_digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_the_ablation_grid() {
        let m = RunConfig::preset("mofme").unwrap();
        assert_eq!(m.model.expert_mode, ExpertMode::Fme);
        assert!(m.model.router.mode.is_uar());
        assert_eq!(m.loss.objective, Objective::Mofme);
        let b = RunConfig::preset("baseline").unwrap();
        assert_eq!(b.model.expert_mode, ExpertMode::Dense);
        assert_eq!(RunConfig::preset("moe").unwrap().loss.objective, Objective::Moe);
        assert!(RunConfig::preset("moe+uar").unwrap().model.router.mode.is_uar());
        assert_eq!(RunConfig::preset("nope").unwrap_err().kind(), "config");
        let matched = RunConfig::preset("baseline-matched").unwrap();
        assert!(matched.model.ffn_hidden > 0);
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::preset("mofme").unwrap();
        let text = c.to_toml_string();
        assert!(text.contains("model.router.top_k = 2\n"));
        let back = RunConfig::default().merge_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::default()
            .with_overrides(&["model.router.top_k=1", "optim.lr = 1e-3", "model.expert_mode=moe"])
            .unwrap();
        assert_eq!(c.model.router.top_k, 1);
        assert_eq!(c.optim.lr, 1e-3);
        assert_eq!(c.model.expert_mode, ExpertMode::Moe);
        assert_eq!(RunConfig::default().with_overrides(&["model.bogus=1"]).unwrap_err().kind(), "config");
        assert!(RunConfig::default().merge_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::default().with_overrides(&["model.dim=abc"]).is_err());
        assert!(RunConfig::default().with_overrides(&["noequals"]).is_err());
    }

    #[test]
    fn digests_track_relevant_keys() {
        let a = RunConfig::default();
        let moved = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), moved.digest());
        let reseeded = a.with_overrides(&["seed=5"]).unwrap();
        assert_ne!(a.digest(), reseeded.digest());
        assert_eq!(a.model_digest(), reseeded.model_digest());
        let wider = a.with_overrides(&["model.dim=32"]).unwrap();
        assert_ne!(a.model_digest(), wider.model_digest());
        assert_eq!(a.model_digest(), model_digest(&a.model).unwrap());
        assert_eq!(a.digest_hex().len(), 64);
    }

    #[test]
    fn float_rendering_survives_reparse() {
        let c = RunConfig::default().with_overrides(&["optim.lr=1.0"]).unwrap();
        let back = RunConfig::default().merge_toml(&c.to_toml_string()).unwrap();
        assert_eq!(back.optim.lr, 1.0);
    }
}
