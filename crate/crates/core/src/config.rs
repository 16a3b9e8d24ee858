//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are errors.

use std::path::Path;

use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::inference::FilterConfig;
use crate::losses::{LossWeights, MaskLossOptions};
use crate::model::{ModelConfig, OptimConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub cluster: ClusterConfig,
    /// Closed-world PQ the smoke run is expected to reach.
    pub pq_target: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            cluster: ClusterConfig::default(),
            pq_target: 0.5,
        }
    }
}

/// Every recognized key, in echo order.
pub const KEYS: [&str; 30] = [
    "seed",
    "steps",
    "batch_size",
    "point_budget",
    "hflip",
    "best_window",
    "lr",
    "weight_decay",
    "clip_norm",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lambda_ce",
    "lambda_sdice",
    "lambda_evi",
    "no_object_coeff",
    "target_eps",
    "dice_smooth",
    "height",
    "width",
    "embed_dim",
    "stem_channels",
    "num_queries",
    "query_dim",
    "mlp_hidden",
    "object_mask_threshold",
    "k_sigma",
    "dbscan_eps",
    "dbscan_min_samples",
    "pq_target",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" => t.seed = parse_num(key, v)?,
            "steps" => t.steps = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "point_budget" => t.point_budget = parse_num(key, v)?,
            "hflip" => t.hflip = parse_bool(key, v)?,
            "best_window" => t.best_window = parse_num(key, v)?,
            "lr" => t.optim.lr = parse_num(key, v)?,
            "weight_decay" => t.optim.weight_decay = parse_num(key, v)?,
            "clip_norm" => t.optim.clip_norm = parse_num(key, v)?,
            "adam_beta1" => t.optim.beta1 = parse_num(key, v)?,
            "adam_beta2" => t.optim.beta2 = parse_num(key, v)?,
            "adam_eps" => t.optim.eps = parse_num(key, v)?,
            "lambda_ce" => t.weights.lambda_ce = parse_num(key, v)?,
            "lambda_sdice" => t.weights.lambda_sdice = parse_num(key, v)?,
            "lambda_evi" => t.weights.lambda_evi = parse_num(key, v)?,
            "no_object_coeff" => t.weights.no_object_coeff = parse_num(key, v)?,
            "target_eps" => t.mask.target_eps = parse_num(key, v)?,
            "dice_smooth" => t.mask.dice_smooth = parse_num(key, v)?,
            "height" => m.height = parse_num(key, v)?,
            "width" => m.width = parse_num(key, v)?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "stem_channels" => m.stem_channels = parse_num(key, v)?,
            "num_queries" => m.num_queries = parse_num(key, v)?,
            "query_dim" => m.query_dim = parse_num(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse_num(key, v)?,
            "object_mask_threshold" => self.filter.object_mask_threshold = parse_num(key, v)?,
            "k_sigma" => self.cluster.k_sigma = parse_num(key, v)?,
            "dbscan_eps" => self.cluster.eps = parse_num(key, v)?,
            "dbscan_min_samples" => self.cluster.min_samples = parse_num(key, v)?,
            "pq_target" => self.pq_target = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (t, m) = (&self.train, &self.model);
        Some(match key {
            "seed" => t.seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "point_budget" => t.point_budget.to_string(),
            "hflip" => t.hflip.to_string(),
            "best_window" => t.best_window.to_string(),
            "lr" => t.optim.lr.to_string(),
            "weight_decay" => t.optim.weight_decay.to_string(),
            "clip_norm" => t.optim.clip_norm.to_string(),
            "adam_beta1" => t.optim.beta1.to_string(),
            "adam_beta2" => t.optim.beta2.to_string(),
            "adam_eps" => t.optim.eps.to_string(),
            "lambda_ce" => t.weights.lambda_ce.to_string(),
            "lambda_sdice" => t.weights.lambda_sdice.to_string(),
            "lambda_evi" => t.weights.lambda_evi.to_string(),
            "no_object_coeff" => t.weights.no_object_coeff.to_string(),
            "target_eps" => t.mask.target_eps.to_string(),
            "dice_smooth" => t.mask.dice_smooth.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "stem_channels" => m.stem_channels.to_string(),
            "num_queries" => m.num_queries.to_string(),
            "query_dim" => m.query_dim.to_string(),
            "mlp_hidden" => m.mlp_hidden.to_string(),
            "object_mask_threshold" => self.filter.object_mask_threshold.to_string(),
            "k_sigma" => self.cluster.k_sigma.to_string(),
            "dbscan_eps" => self.cluster.eps.to_string(),
            "dbscan_min_samples" => self.cluster.min_samples.to_string(),
            "pq_target" => self.pq_target.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("known key"))).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        self.cluster.validate()?;
        if !(self.pq_target >= 0.0 && self.pq_target <= 1.0) {
            return Err(Error::Config(format!("pq_target {} outside [0, 1]", self.pq_target)));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        self.train.weights
    }

    pub fn mask_options(&self) -> MaskLossOptions {
        self.train.mask
    }

    pub fn optim(&self) -> OptimConfig {
        self.train.optim
    }
}

/// Serialized as a map in [`KEYS`] order with the textual values.
impl serde::Serialize for RunConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let entries = self.entries();
        let mut m = s.serialize_map(Some(entries.len()))?;
        for (k, v) in &entries {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}
