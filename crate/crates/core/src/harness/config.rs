//! Experiment configuration: TOML with one table per section, `--set`
//! overrides, model-dependent defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetId;
use crate::error::{Error, Result};
use crate::models::ModelId;
use crate::numerics::schedule::Segment;
use crate::numerics::{LrSchedule, OptimizerKind};
use crate::pruning::{MeanMode, Policy, Rates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelId,
    /// Defaults to the dataset the model was built for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Use only the first `n` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Nadam,
    Nsgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Constant learning rate. Mutually exclusive with `lr_segments`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_segments: Option<Vec<Segment>>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Flip + crop augmentation; defaults to on for CIFAR-10 only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_batch() -> usize {
    1000
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all train fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RewindMode {
    /// Surviving weights, optimizer state and schedule go back to epoch k.
    #[default]
    #[serde(rename = "weights+lr")]
    WeightsLr,
    /// Only the schedule goes back; weights are kept, optimizer state zeroed.
    #[serde(rename = "lr-only")]
    LrOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RewindSection {
    /// Defaults to `min(ceil(0.9 T), T - 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u32>,
    #[serde(default)]
    pub mode: RewindMode,
    /// Extra epochs to checkpoint for `sweep-rewind`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep_epochs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_rate_dense")]
    pub rate_dense: f64,
    #[serde(default = "default_rate_conv")]
    pub rate_conv: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_stats_batch")]
    pub stats_batch_size: usize,
    /// Defaults to a stream derived from the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_seed: Option<u64>,
    /// Draw the stats batch through the training augmentation.
    #[serde(default)]
    pub stats_augmented: bool,
    #[serde(default)]
    pub mean_mode: MeanMode,
    /// Also mask consumer weights reading from pruned units.
    #[serde(default)]
    pub cascade: bool,
}

fn default_policy() -> Policy {
    Policy::Iap
}
fn default_rate_dense() -> f64 {
    0.2
}
fn default_rate_conv() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.01
}
fn default_stats_batch() -> usize {
    60
}

impl Default for PruningSection {
    fn default() -> Self {
        toml::from_str("").expect("all pruning fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
    /// Stop at the first round whose accuracy falls more than this many
    /// points below round 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_drop: Option<f64>,
    /// Stop at the first round reaching this compression ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_compression: Option<f64>,
    /// Hard cap on rounds whatever the rule.
    #[serde(default = "default_round_limit")]
    pub round_limit: usize,
}

fn default_round_limit() -> usize {
    200
}

impl Default for StopSection {
    fn default() -> Self {
        toml::from_str("").expect("all stop fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    MaxRounds(usize),
    TargetDrop(f64),
    TargetCompression(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rewind: RewindSection,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub stop: StopSection,
}

/// `(section, key)` for every accepted key; used to resolve bare override
/// keys.
const KEYS: &[(&str, &str)] = &[
    ("experiment", "name"),
    ("experiment", "model"),
    ("experiment", "dataset"),
    ("experiment", "data_dir"),
    ("experiment", "seed"),
    ("experiment", "train_subset"),
    ("experiment", "test_subset"),
    ("train", "optimizer"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "weight_decay"),
    ("train", "lr"),
    ("train", "lr_segments"),
    ("train", "momentum"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "eps"),
    ("train", "augment"),
    ("train", "eval_batch_size"),
    ("rewind", "epoch"),
    ("rewind", "mode"),
    ("rewind", "sweep_epochs"),
    ("pruning", "policy"),
    ("pruning", "rate_dense"),
    ("pruning", "rate_conv"),
    ("pruning", "lambda"),
    ("pruning", "stats_batch_size"),
    ("pruning", "stats_seed"),
    ("pruning", "stats_augmented"),
    ("pruning", "mean_mode"),
    ("pruning", "cascade"),
    ("stop", "max_rounds"),
    ("stop", "target_drop"),
    ("stop", "target_compression"),
    ("stop", "round_limit"),
];

/// Resolves `key` (dotted `section.key` or a bare key) to its section.
pub fn resolve_key(key: &str) -> Result<(&'static str, &'static str)> {
    let hit = match key.split_once('.') {
        Some((s, k)) => KEYS.iter().find(|(ss, kk)| *ss == s && *kk == k),
        None => KEYS.iter().find(|(_, kk)| *kk == key),
    };
    hit.copied()
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides to a parsed document. An empty value
/// removes the key.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let (section, key) = resolve_key(k.trim())?;
        let table = doc
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let table = table
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("[{section}] is not a table")))?;
        if v.trim().is_empty() {
            table.remove(key);
        } else {
            table.insert(key.to_string(), parse_value(v.trim()));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.resolved()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, overrides)
    }

    /// Fully-resolved TOML (what the manifest records).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills model-dependent defaults and validates.
    pub fn resolved(mut self) -> Result<Self> {
        let m = self.experiment.model;
        let (lr, epochs) = match m {
            ModelId::Lenet300 => (0.0012, 6),
            ModelId::Lenet5 => (0.0002, 24),
        };
        let dataset = *self.experiment.dataset.get_or_insert(match m {
            ModelId::Lenet300 => DatasetId::Mnist,
            ModelId::Lenet5 => DatasetId::Cifar10,
        });
        let t = &mut self.train;
        t.optimizer.get_or_insert(OptimizerName::Nadam);
        t.batch_size.get_or_insert(60);
        t.weight_decay.get_or_insert(1e-4);
        t.augment.get_or_insert(dataset == DatasetId::Cifar10);
        let total = match &t.lr_segments {
            Some(segs) => segs.last().map_or(0, |s| s.end),
            None => {
                t.lr.get_or_insert(lr);
                *t.epochs.get_or_insert(epochs)
            }
        };
        let total = *t.epochs.get_or_insert(total);
        self.rewind
            .epoch
            .get_or_insert(((0.9 * f64::from(total)).ceil() as u32).min(total.saturating_sub(1)));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let t = &self.train;
        let total = self.epochs();
        if t.lr.is_some() && t.lr_segments.is_some() {
            return cfg("set either train.lr or train.lr_segments, not both".into());
        }
        let sched = self.schedule()?;
        if sched.total_epochs != total {
            return cfg(format!(
                "schedule covers {} epochs but train.epochs = {total}",
                sched.total_epochs
            ));
        }
        if let Some(lr) = t.lr {
            if !(lr > 0.0) {
                return cfg(format!("train.lr must be > 0, got {lr}"));
            }
        }
        if t.batch_size == Some(0) || t.eval_batch_size == 0 {
            return cfg("batch sizes must be >= 1".into());
        }
        if !(t.weight_decay.unwrap_or(0.0) >= 0.0) {
            return cfg("train.weight_decay must be >= 0".into());
        }
        let k = self.rewind_epoch();
        if !(0 < k && k < total) {
            return cfg(format!(
                "rewind epoch must satisfy 0 < k < T, got k={k}, T={total}"
            ));
        }
        if let Some(&e) = self.rewind.sweep_epochs.iter().find(|&&e| e > total) {
            return cfg(format!("sweep epoch {e} beyond T={total}"));
        }
        let p = &self.pruning;
        for (name, r) in [("rate_dense", p.rate_dense), ("rate_conv", p.rate_conv)] {
            if !(r > 0.0 && r < 1.0) {
                return cfg(format!("pruning.{name} must be in (0, 1), got {r}"));
            }
        }
        if !(p.lambda > 0.0) {
            return cfg(format!("pruning.lambda must be > 0, got {}", p.lambda));
        }
        if p.stats_batch_size == 0 {
            return cfg("pruning.stats_batch_size must be >= 1".into());
        }
        self.stop_rule()?;
        Ok(())
    }

    pub fn dataset(&self) -> DatasetId {
        self.experiment.dataset.expect("resolved config")
    }

    pub fn epochs(&self) -> u32 {
        self.train.epochs.expect("resolved config")
    }

    pub fn batch_size(&self) -> usize {
        self.train.batch_size.expect("resolved config")
    }

    pub fn rewind_epoch(&self) -> u32 {
        self.rewind.epoch.expect("resolved config")
    }

    pub fn augment(&self) -> bool {
        self.train.augment.unwrap_or(false)
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        match (&self.train.lr_segments, self.train.lr) {
            (Some(segs), _) => LrSchedule::piecewise(segs.clone()),
            (None, Some(lr)) => Ok(LrSchedule::constant(lr, self.epochs())),
            (None, None) => Err(Error::Config("no learning rate configured".into())),
        }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        let t = &self.train;
        match t.optimizer.unwrap_or(OptimizerName::Nadam) {
            OptimizerName::Nadam => OptimizerKind::Nadam {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            OptimizerName::Nsgd => OptimizerKind::Nsgd { momentum: t.momentum },
        }
    }

    pub fn rates(&self) -> Rates {
        Rates {
            dense: self.pruning.rate_dense,
            conv: self.pruning.rate_conv,
        }
    }

    /// The single active stopping rule.
    pub fn stop_rule(&self) -> Result<StopRule> {
        let s = &self.stop;
        let rules: Vec<StopRule> = [
            s.max_rounds.map(StopRule::MaxRounds),
            s.target_drop.map(StopRule::TargetDrop),
            s.target_compression.map(StopRule::TargetCompression),
        ]
        .into_iter()
        .flatten()
        .collect();
        match rules.as_slice() {
            [r] => {
                match *r {
                    StopRule::TargetDrop(d) if !(d >= 0.0) => {
                        return Err(Error::Config(format!("stop.target_drop must be >= 0, got {d}")))
                    }
                    StopRule::TargetCompression(c) if !(c >= 1.0) => {
                        return Err(Error::Config(format!(
                            "stop.target_compression must be >= 1, got {c}"
                        )))
                    }
                    _ => {}
                }
                Ok(*r)
            }
            [] => Err(Error::Config(
                "no stopping rule: set one of stop.max_rounds, stop.target_drop, stop.target_compression"
                    .into(),
            )),
            _ => Err(Error::Config("more than one stopping rule set".into())),
        }
    }
}
