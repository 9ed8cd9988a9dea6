//! Run configuration read from TOML.
//!
//! The `[model]` table either spells out a full architecture (tagged by
//! `arch`) or names a `preset` and overrides individual keys. Nested tables
//! merge key by key. Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::rev::Schedule;
use crate::zoo::{self, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

/// Synthetic Gaussian-mixture images; one mean image per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    /// Standard deviation of the class means.
    pub separation: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            separation: 1.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch: usize,
    pub precision: Precision,
    /// Overrides the schedule implied by `model.arch`.
    pub schedule: Option<Schedule>,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            steps: 500,
            batch: 32,
            precision: Precision::F32,
            schedule: None,
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub invert_tol_f64: f64,
    pub invert_tol_f32: f64,
    pub grad_tol: f64,
    pub fd_tol: f64,
    pub invert_widths: Vec<usize>,
    pub invert_depths: Vec<usize>,
    pub precisions: Vec<Precision>,
    /// Drop-path rate forced on during the gradient-equivalence suite.
    pub drop_path_rate: f64,
    pub batch: usize,
    pub memory_depths: Vec<usize>,
    pub memory_dim: usize,
    pub memory_flat_ratio: f64,
    pub memory_cached_ratio: f64,
    /// Allowed relative gap between estimator and meter.
    pub estimate_tolerance: f64,
    /// Kernel whose VJP is perturbed, to exercise fault attribution.
    pub corrupt_kernel: Option<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            invert_tol_f64: 1e-10,
            invert_tol_f32: 1e-4,
            grad_tol: 1e-9,
            fd_tol: 1e-5,
            invert_widths: vec![64],
            invert_depths: vec![4, 12],
            precisions: vec![Precision::F64, Precision::F32],
            drop_path_rate: 0.2,
            batch: 2,
            memory_depths: vec![4, 8, 16, 24],
            memory_dim: 32,
            memory_flat_ratio: 1.25,
            memory_cached_ratio: 3.0,
            estimate_tolerance: 0.3,
            corrupt_kernel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub depths: Vec<usize>,
    /// First-stage widths; empty keeps the model's width.
    pub dims: Vec<usize>,
    pub schedules: Vec<Schedule>,
    pub batch: usize,
    pub warmup: usize,
    pub steps: usize,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depths: vec![4, 8, 16, 24],
            dims: Vec::new(),
            schedules: vec![Schedule::Reversible, Schedule::Cached],
            batch: 4,
            warmup: 1,
            steps: 3,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(deserialize_with = "model_section")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves a `[model]` table, expanding `preset` if present.
pub fn resolve_model(mut table: toml::Table) -> Result<ModelConfig> {
    if let Some(p) = table.remove("preset") {
        let name = p
            .as_str()
            .ok_or_else(|| Error::Config("model.preset must be a string".into()))?;
        let base = zoo::preset(name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        table = merged;
    }
    let model = ModelConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| Error::Config(format!("model: {e}")))?;
    model.validate()?;
    Ok(model)
}

fn model_section<'de, D: Deserializer<'de>>(d: D) -> Result<ModelConfig, D::Error> {
    let table = toml::Table::deserialize(d)?;
    resolve_model(table).map_err(serde::de::Error::custom)
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Self {
            seed: 0,
            model: zoo::preset(name)?,
            train: TrainConfig::default(),
            verify: VerifyConfig::default(),
            bench: BenchConfig::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Schedule used for training.
    pub fn schedule(&self) -> Schedule {
        self.train.schedule.unwrap_or_else(|| self.model.schedule())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("train.lr", t.lr)?;
        positive("train.eps", t.eps)?;
        if t.weight_decay.is_nan() || t.weight_decay < 0.0 {
            return Err(Error::Config(
                "train.weight_decay must be non-negative".into(),
            ));
        }
        for (name, b) in [
            ("train.momentum", t.momentum),
            ("train.beta1", t.beta1),
            ("train.beta2", t.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if t.batch == 0 || t.data.samples == 0 {
            return Err(Error::Config(
                "train.batch and train.data.samples must be positive".into(),
            ));
        }
        if !(t.data.noise >= 0.0 && t.data.separation >= 0.0) {
            return Err(Error::Config(
                "train.data noise and separation must be non-negative".into(),
            ));
        }
        let v = &self.verify;
        if v.batch == 0 || v.memory_dim == 0 || v.memory_depths.len() < 2 {
            return Err(Error::Config(
                "verify needs batch, memory_dim and at least two memory_depths".into(),
            ));
        }
        if !(0.0..1.0).contains(&v.drop_path_rate) {
            return Err(Error::Config(
                "verify.drop_path_rate must lie in [0, 1)".into(),
            ));
        }
        let b = &self.bench;
        if b.batch == 0 || b.steps == 0 || b.depths.is_empty() || b.schedules.is_empty() {
            return Err(Error::Config(
                "bench needs batch, steps, depths and schedules".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let cfg = RunConfig::parse(
            r#"
            seed = 5
            [model]
            preset = "rev_vit_tiny"
            depth = 2
            [train]
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.depth(), 2);
        assert_eq!(cfg.model.dim(), 32);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch, 32);
    }

    #[test]
    fn nested_override_merges() {
        let cfg = RunConfig::parse(
            r#"
            [model]
            preset = "rev_mvit_tiny"
            fusion = { variant = "max" }
            "#,
        )
        .unwrap();
        match cfg.model {
            ModelConfig::RevMvit(m) => {
                assert_eq!(m.fusion.variant, crate::mvit::FusionVariant::Max)
            }
            _ => panic!("wrong arch"),
        }
    }

    #[test]
    fn arch_switch_on_preset() {
        let cfg = RunConfig::parse("[model]\npreset = \"rev_vit_tiny\"\narch = \"cached_vit\"\n")
            .unwrap();
        assert_eq!(cfg.schedule(), Schedule::Cached);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "bogus = 1\n[model]\npreset = \"rev_vit_tiny\"\n",
            "[model]\npreset = \"rev_vit_tiny\"\nwidth = 3\n",
            "[model]\npreset = \"rev_vit_tiny\"\n[train]\nlearning_rate = 1.0\n",
            "[model]\npreset = \"rev_vit_tiny\"\n[train.data]\nclusters = 3\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn ill_typed_and_invalid_rejected() {
        for text in [
            "[model]\npreset = \"rev_vit_tiny\"\ndepth = \"four\"\n",
            "[model]\npreset = \"rev_vit_tiny\"\nembed_dim = 31\n",
            "[model]\npreset = \"nope\"\n",
            "[model]\npreset = \"rev_vit_tiny\"\n[train]\nlr = -1.0\n",
            "seed = 1\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::from_preset("rev_mvit_tiny").unwrap();
        cfg.seed = 9;
        cfg.train.schedule = Some(Schedule::Cached);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
