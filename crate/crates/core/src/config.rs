//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::ProtocolConfig;
use crate::mining::Bucket;
use crate::objectives::Regularizer;
use crate::synth::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be 32 or 64, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

/// Everything a CLI run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub protocol_seed: u64,
    pub calibration_seed: u64,
    pub fusion_weight: f64,
    pub precision: Precision,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            protocol_seed: 11,
            calibration_seed: 12,
            fusion_weight: 0.5,
            precision: Precision::F32,
            deterministic: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset_seed",
        "identities",
        "test_identities",
        "images_per_identity",
        "image_size",
        "train_seed",
        "regularizer",
        "k",
        "images_per_template",
        "precision",
        "deterministic",
        "lr",
        "batch_pairs",
        "max_steps",
        "mining_refresh",
        "mining_identities",
        "templates_per_identity",
        "bucket_centers",
        "bucket_half_width",
        "bucket_weights",
        "difficulty_ceiling",
        "alpha1",
        "alpha2",
        "alpha3",
        "decay_period",
        "expert_width",
        "conv1",
        "conv2",
        "features",
        "augment",
        "plateau_window",
        "plateau_threshold",
        "lr_drop_factor",
        "max_lr_drops",
        "baseline_steps",
        "baseline_batch",
        "baseline_lr",
        "protocol_pairs",
        "protocol_templates_per_identity",
        "protocol_min_size",
        "protocol_max_size",
        "protocol_seed",
        "calibration_seed",
        "fusion_weight",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset_seed" => self.dataset.seed = parse(key, value)?,
            "identities" => self.dataset.identities = parse(key, value)?,
            "test_identities" => self.dataset.test_identities = parse(key, value)?,
            "images_per_identity" => self.dataset.images_per_identity = parse(key, value)?,
            "image_size" => self.dataset.image_size = parse(key, value)?,
            "train_seed" => t.train_seed = parse(key, value)?,
            "regularizer" => t.regularizer = value.parse::<Regularizer>()?,
            "k" => t.landmarks = parse(key, value)?,
            "images_per_template" => t.images_per_template = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_pairs" => t.batch_pairs = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "mining_refresh" => t.mining_refresh = parse(key, value)?,
            "mining_identities" => t.round.identities = parse(key, value)?,
            "templates_per_identity" => t.round.templates_per_identity = parse(key, value)?,
            "bucket_centers" | "bucket_weights" => {
                let list = parse_list(key, value)?;
                let half = t.sampler.buckets.first().map_or(0.1, |b| b.half_width);
                if list.len() != t.sampler.buckets.len() {
                    t.sampler.buckets.resize(
                        list.len(),
                        Bucket {
                            center: 0.0,
                            half_width: half,
                            weight: 1.0,
                        },
                    );
                }
                for (b, v) in t.sampler.buckets.iter_mut().zip(list) {
                    if key == "bucket_centers" {
                        b.center = v;
                    } else {
                        b.weight = v;
                    }
                }
            }
            "bucket_half_width" => {
                let h = parse(key, value)?;
                t.sampler.buckets.iter_mut().for_each(|b| b.half_width = h);
            }
            "difficulty_ceiling" => t.sampler.ceiling = parse(key, value)?,
            "alpha1" => t.weights.alpha1 = parse(key, value)?,
            "alpha2" => t.weights.alpha2 = parse(key, value)?,
            "alpha3" => t.weights.alpha3_init = parse(key, value)?,
            "decay_period" => t.weights.decay_period = parse(key, value)?,
            "expert_width" => t.expert_width = parse(key, value)?,
            "conv1" => t.backbone.conv1 = parse(key, value)?,
            "conv2" => t.backbone.conv2 = parse(key, value)?,
            "features" => t.backbone.features = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "plateau_window" => t.plateau_window = parse(key, value)?,
            "plateau_threshold" => t.plateau_threshold = parse(key, value)?,
            "lr_drop_factor" => t.lr_drop_factor = parse(key, value)?,
            "max_lr_drops" => t.max_lr_drops = parse(key, value)?,
            "baseline_steps" => t.baseline_steps = parse(key, value)?,
            "baseline_batch" => t.baseline_batch = parse(key, value)?,
            "baseline_lr" => t.baseline_lr = parse(key, value)?,
            "protocol_pairs" => self.protocol.pairs = parse(key, value)?,
            "protocol_templates_per_identity" => self.protocol.templates_per_identity = parse(key, value)?,
            "protocol_min_size" => self.protocol.min_size = parse(key, value)?,
            "protocol_max_size" => self.protocol.max_size = parse(key, value)?,
            "protocol_seed" => self.protocol_seed = parse(key, value)?,
            "calibration_seed" => self.calibration_seed = parse(key, value)?,
            "fusion_weight" => self.fusion_weight = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let b = &t.sampler.buckets;
        Some(match key {
            "dataset_seed" => self.dataset.seed.to_string(),
            "identities" => self.dataset.identities.to_string(),
            "test_identities" => self.dataset.test_identities.to_string(),
            "images_per_identity" => self.dataset.images_per_identity.to_string(),
            "image_size" => self.dataset.image_size.to_string(),
            "train_seed" => t.train_seed.to_string(),
            "regularizer" => t.regularizer.to_string(),
            "k" => t.landmarks.to_string(),
            "images_per_template" => t.images_per_template.to_string(),
            "precision" => self.precision.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "lr" => t.lr.to_string(),
            "batch_pairs" => t.batch_pairs.to_string(),
            "max_steps" => t.max_steps.to_string(),
            "mining_refresh" => t.mining_refresh.to_string(),
            "mining_identities" => t.round.identities.to_string(),
            "templates_per_identity" => t.round.templates_per_identity.to_string(),
            "bucket_centers" => join(b.iter().map(|b| b.center)),
            "bucket_half_width" => b.first().map_or(0.1, |b| b.half_width).to_string(),
            "bucket_weights" => join(b.iter().map(|b| b.weight)),
            "difficulty_ceiling" => t.sampler.ceiling.to_string(),
            "alpha1" => t.weights.alpha1.to_string(),
            "alpha2" => t.weights.alpha2.to_string(),
            "alpha3" => t.weights.alpha3_init.to_string(),
            "decay_period" => t.weights.decay_period.to_string(),
            "expert_width" => t.expert_width.to_string(),
            "conv1" => t.backbone.conv1.to_string(),
            "conv2" => t.backbone.conv2.to_string(),
            "features" => t.backbone.features.to_string(),
            "augment" => t.augment.to_string(),
            "plateau_window" => t.plateau_window.to_string(),
            "plateau_threshold" => t.plateau_threshold.to_string(),
            "lr_drop_factor" => t.lr_drop_factor.to_string(),
            "max_lr_drops" => t.max_lr_drops.to_string(),
            "baseline_steps" => t.baseline_steps.to_string(),
            "baseline_batch" => t.baseline_batch.to_string(),
            "baseline_lr" => t.baseline_lr.to_string(),
            "protocol_pairs" => self.protocol.pairs.to_string(),
            "protocol_templates_per_identity" => self.protocol.templates_per_identity.to_string(),
            "protocol_min_size" => self.protocol.min_size.to_string(),
            "protocol_max_size" => self.protocol.max_size.to_string(),
            "protocol_seed" => self.protocol_seed.to_string(),
            "calibration_seed" => self.calibration_seed.to_string(),
            "fusion_weight" => self.fusion_weight.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key, one `key = value` line each, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config("fusion_weight must lie in [0, 1]".into()));
        }
        if self.dataset.image_size % 8 != 0 || self.dataset.image_size == 0 {
            return Err(Error::Config("image_size must be a positive multiple of 8".into()));
        }
        if self.dataset.test_identities >= self.dataset.identities {
            return Err(Error::Config("test_identities must be below identities".into()));
        }
        Ok(())
    }
}
