//! Run configuration: the `key = value` file format, overrides, validation
//! and the canonical hash recorded in every artifact.

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::pipeline::{LossWeights, NetConfig};
use crate::search_space::MsmSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs_search: usize,
    pub epochs_train: usize,
    pub lr_w: f64,
    pub lr_arch: f64,
    pub batch: usize,
    pub k_nodes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub anomaly_area_min: f64,
    pub anomaly_area_max: f64,
    pub keep_normal: f64,
    pub fpr_cap: f64,
    pub lambda_rec: f64,
    pub lambda_seg: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs_search: 30,
            epochs_train: 60,
            lr_w: 0.01,
            lr_arch: 0.01,
            batch: 8,
            k_nodes: 2,
            channels: 8,
            image_size: 32,
            n_train: 200,
            n_test: 100,
            anomaly_area_min: 0.01,
            anomaly_area_max: 0.08,
            keep_normal: 0.5,
            fpr_cap: 0.3,
            lambda_rec: 1.0,
            lambda_seg: 1.0,
        }
    }
}

/// Every recognized key, in canonical order.
pub const KEYS: [&str; 16] = [
    "epochs_search",
    "epochs_train",
    "lr_w",
    "lr_arch",
    "batch",
    "k_nodes",
    "channels",
    "image_size",
    "n_train",
    "n_test",
    "anomaly_area_min",
    "anomaly_area_max",
    "keep_normal",
    "fpr_cap",
    "lambda_rec",
    "lambda_seg",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

impl SearchConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs_search" => self.epochs_search = parse_num(key, v)?,
            "epochs_train" => self.epochs_train = parse_num(key, v)?,
            "lr_w" => self.lr_w = parse_num(key, v)?,
            "lr_arch" => self.lr_arch = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "k_nodes" => self.k_nodes = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "anomaly_area_min" => self.anomaly_area_min = parse_num(key, v)?,
            "anomaly_area_max" => self.anomaly_area_max = parse_num(key, v)?,
            "keep_normal" => self.keep_normal = parse_num(key, v)?,
            "fpr_cap" => self.fpr_cap = parse_num(key, v)?,
            "lambda_rec" => self.lambda_rec = parse_num(key, v)?,
            "lambda_seg" => self.lambda_seg = parse_num(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs_search" => self.epochs_search.to_string(),
            "epochs_train" => self.epochs_train.to_string(),
            "lr_w" => self.lr_w.to_string(),
            "lr_arch" => self.lr_arch.to_string(),
            "batch" => self.batch.to_string(),
            "k_nodes" => self.k_nodes.to_string(),
            "channels" => self.channels.to_string(),
            "image_size" => self.image_size.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "anomaly_area_min" => self.anomaly_area_min.to_string(),
            "anomaly_area_max" => self.anomaly_area_max.to_string(),
            "keep_normal" => self.keep_normal.to_string(),
            "fpr_cap" => self.fpr_cap.to_string(),
            "lambda_rec" => self.lambda_rec.to_string(),
            "lambda_seg" => self.lambda_seg.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<SearchConfig> {
        let mut cfg = SearchConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SearchConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch),
            ("k_nodes", self.k_nodes),
            ("channels", self.channels),
            ("n_train", self.n_train),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("lr_w", self.lr_w), ("lr_arch", self.lr_arch)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{k} must be a finite non-negative number")));
            }
        }
        for (k, v) in [("lambda_rec", self.lambda_rec), ("lambda_seg", self.lambda_seg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{k} must be a finite non-negative number")));
            }
        }
        if !(self.fpr_cap > 0.0 && self.fpr_cap <= 1.0) {
            return Err(Error::config(format!("fpr_cap {} outside (0, 1]", self.fpr_cap)));
        }
        if self.n_train < 2 {
            return Err(Error::config("n_train must be at least 2 to split for search"));
        }
        self.data_config().validate()?;
        self.net_config(MsmSet::FULL).validate()
    }

    /// Canonical `key = value` rendering in [`KEYS`] order.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image_size: self.image_size,
            n_train: self.n_train,
            n_test: self.n_test,
            area_min: self.anomaly_area_min,
            area_max: self.anomaly_area_max,
            keep_normal: self.keep_normal,
            ..DataConfig::default()
        }
    }

    pub fn net_config(&self, msms: MsmSet) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            channels: self.channels,
            k: self.k_nodes,
            msms,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rec: self.lambda_rec,
            seg: self.lambda_seg,
        }
    }
}
