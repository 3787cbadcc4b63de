//! The pipeline configuration file: one TOML document with flat sections
//! mirroring the module sub-configs. Command-line `key=value` overrides are
//! applied onto the serialized tree, so every field stays reachable without
//! a dedicated flag; the effective merged config is written into each run
//! directory for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cascade::{CascadeConfig, Gating};
use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::nn::AdamConfig;
use crate::preprocess::{BiasOptions, PreprocessOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(flatten)]
    pub focal: FocalParams,
    /// Weights of the three auxiliary heads, coarsest first.
    pub aux_weights: [f64; 3],
    /// Weights of the three cascade steps (WT, TC, ET).
    pub step_weights: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal: FocalParams::default(),
            aux_weights: [0.5, 0.5, 0.5],
            step_weights: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    /// Fixed at 1: the backend optimizes one patch per step.
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_plateau: f64,
    /// Epochs without relative improvement before the single LR decay.
    pub plateau_patience: usize,
    pub plateau_min_rel_improvement: f64,
    pub patch_size: [usize; 3],
    /// Probability of resampling a training crop until it contains tumor.
    pub foreground_bias: f64,
    pub gating: Gating,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 50,
            batch_size: 1,
            lr_initial: 1e-3,
            lr_after_plateau: 5e-4,
            plateau_patience: 5,
            plateau_min_rel_improvement: 1e-4,
            patch_size: [96, 96, 96],
            foreground_bias: 0.0,
            gating: Gating::Soft,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub patch_size: [usize; 3],
    /// Defaults to half the patch size (50% overlap) when absent.
    pub stride: Option<[usize; 3]>,
    /// Binarization thresholds per step (WT, TC, ET).
    pub thresholds: [f64; 3],
    pub gating: Gating,
    pub save_probs: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            patch_size: [96, 96, 96],
            stride: None,
            thresholds: [0.5, 0.5, 0.5],
            gating: Gating::Hard,
            save_probs: false,
        }
    }
}

impl InferSection {
    pub fn effective_stride(&self) -> [usize; 3] {
        self.stride.unwrap_or([
            (self.patch_size[0] / 2).max(1),
            (self.patch_size[1] / 2).max(1),
            (self.patch_size[2] / 2).max(1),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    pub bias_correction: bool,
    pub bias_degree: usize,
    pub bias_iterations: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let b = BiasOptions::default();
        PreprocessSection { bias_correction: true, bias_degree: b.degree, bias_iterations: b.iterations }
    }
}

impl PreprocessSection {
    pub fn to_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            bias: self.bias_correction.then_some(BiasOptions {
                degree: self.bias_degree,
                iterations: self.bias_iterations,
            }),
        }
    }
}

/// Root configuration: hyperparameters of every stage.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cascade: CascadeConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub infer: InferSection,
    pub preprocess: PreprocessSection,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        self.loss.focal.validate()?;
        self.augment.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if t.batch_size != 1 {
            return Err(Error::Config(
                "train.batch_size must be 1 (the backend optimizes one patch per step)".into(),
            ));
        }
        if t.lr_initial <= 0.0 || t.lr_after_plateau <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.foreground_bias) {
            return Err(Error::Config("train.foreground_bias must lie in [0,1]".into()));
        }
        let div = self.cascade.divisor();
        for (name, size) in [("train", t.patch_size), ("infer", self.infer.patch_size)] {
            if size.iter().any(|&s| s == 0 || s % div != 0) {
                return Err(Error::Config(format!(
                    "{name}.patch_size {size:?} must be positive and divisible by {div} (cascade levels = {})",
                    self.cascade.levels
                )));
            }
        }
        for tau in self.infer.thresholds {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Config(format!("infer threshold {tau} must lie in (0,1)")));
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Applies `section.key=value` overrides onto a config. The key path must
/// exist; values are parsed as TOML literals (bare words fall back to
/// strings).
pub fn apply_overrides(cfg: &PipelineConfig, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut root: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for (key, value) in overrides {
        let parsed: toml::Value = match toml::from_str::<ValueHolder>(&format!("v = {value}")) {
            Ok(holder) => holder.v,
            Err(_) => toml::Value::String(value.clone()),
        };
        let mut parts = key.split('.').collect::<Vec<_>>();
        let leaf = parts.pop().ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
        let mut table = &mut root;
        for part in parts {
            table = table
                .get_mut(part)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{key}'")))?;
        }
        if !table.contains_key(leaf) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        table.insert(leaf.to_string(), parsed);
    }
    let merged: PipelineConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(format!("invalid override: {e}")))?;
    merged.validate()?;
    Ok(merged)
}

#[derive(Deserialize)]
struct ValueHolder {
    v: toml::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_match_reported_schedule() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train.lr_initial, 1e-3);
        assert_eq!(cfg.train.lr_after_plateau, 5e-4);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.batch_size, 1);
        assert_eq!(cfg.train.patch_size, [96, 96, 96]);
        assert_eq!(cfg.loss.focal.gamma, 2.0);
        assert_eq!(cfg.loss.focal.alpha, 0.25);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = PipelineConfig::default();
        let merged = apply_overrides(
            &cfg,
            &[
                ("train.epochs".into(), "3".into()),
                ("loss.gamma".into(), "1.5".into()),
                ("train.patch_size".into(), "[32, 32, 32]".into()),
                ("infer.gating".into(), "\"soft\"".into()),
            ],
        )
        .unwrap();
        assert_eq!(merged.train.epochs, 3);
        assert_eq!(merged.loss.focal.gamma, 1.5);
        assert_eq!(merged.train.patch_size, [32, 32, 32]);
        assert_eq!(merged.infer.gating, Gating::Soft);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let cfg = PipelineConfig::default();
        assert!(apply_overrides(&cfg, &[("train.bogus".into(), "1".into())]).is_err());
        assert!(apply_overrides(&cfg, &[("nosection.x".into(), "1".into())]).is_err());
    }

    #[test]
    fn invalid_override_value_is_rejected() {
        let cfg = PipelineConfig::default();
        // Patch size indivisible by the cascade downsampling factor.
        assert!(apply_overrides(&cfg, &[("train.patch_size".into(), "[33,33,33]".into())]).is_err());
        assert!(apply_overrides(&cfg, &[("train.batch_size".into(), "4".into())]).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: PipelineConfig = toml::from_str(
            "seed = 9\n[cascade]\nlevels = 2\nbase_channels = 4\n[train]\nepochs = 2\npatch_size = [32,32,32]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.cascade.levels, 2);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr_initial, 1e-3);
        assert_eq!(cfg.infer.thresholds, [0.5; 3]);
    }
}
