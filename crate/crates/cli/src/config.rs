//! The experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use augsens_core::augment::AugmentationSet;
use augsens_core::estimators::SensitivityKind;
use augsens_core::pipeline::HsvChannel;
use augsens_core::Scheme;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

/// Environment variable that overrides [`ExperimentConfig::output`].
pub const STORE_ENV: &str = "AUGSENS_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// TinyNet-A weights in the tensor container format; absent means a
    /// network with seeded convolutions and a readout fitted on the dataset.
    #[serde(default)]
    pub network: Option<PathBuf>,
    /// Dataset container; absent means the synthetic desk set.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub augmentation_set: AugmentationSet,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Probability that a transform is switched on (scheme 2 only).
    #[serde(default = "default_switch")]
    pub switch_probability: f64,
    pub plan: PlanConfig,
    pub checkpoints: Vec<String>,
    /// Keep rendered samples and activations on disk instead of streaming.
    #[serde(default)]
    pub persist_activations: bool,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub class_sense: ClassSenseConfig,
    #[serde(default)]
    pub segment: SegmentConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlanConfig {
    Saltelli { n_base: usize },
    Shapley { n_perm: usize, n_outer: usize, n_inner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Masked checkpoints; defaults to every configured checkpoint except
    /// the classifying one.
    pub checkpoints: Option<Vec<String>>,
    /// Sensitivity kinds used as mask sources; empty means all estimated.
    pub kinds: Vec<SensitivityKind>,
    pub images_per_class: usize,
    pub repeats: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            checkpoints: None,
            kinds: Vec::new(),
            images_per_class: 20,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassSenseConfig {
    pub top_k: usize,
    pub images_per_class: usize,
    pub trials: usize,
    /// Empty means every estimated kind usable for class matching.
    pub kinds: Vec<SensitivityKind>,
}

impl Default for ClassSenseConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            images_per_class: 20,
            trials: augsens_core::classsense::DEFAULT_TRIALS,
            kinds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub segments: Vec<SegmentSpec>,
    pub channels: Vec<HsvChannel>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            segments: vec![
                SegmentSpec {
                    from: "c1".into(),
                    to: "c2".into(),
                },
                SegmentSpec {
                    from: "c2".into(),
                    to: "c3".into(),
                },
            ],
            channels: HsvChannel::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub lda_folds: usize,
    pub lda_repeats: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            lda_folds: 5,
            lda_repeats: 100,
        }
    }
}

fn default_scheme() -> Scheme {
    Scheme::Independent
}

fn default_switch() -> f64 {
    0.5
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.network.as_mut().map(resolve);
        cfg.dataset.as_mut().map(resolve);
        resolve(&mut cfg.output);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.network.iter().chain(&self.dataset) {
            if !p.is_file() {
                return Err(bad(format!("{} does not exist", p.display())));
            }
        }
        match self.plan {
            PlanConfig::Saltelli { n_base } => {
                if n_base == 0 || !n_base.is_power_of_two() {
                    return Err(bad(format!("n_base = {n_base} must be a power of two")));
                }
                if self.scheme != Scheme::Independent {
                    return Err(bad("Saltelli plans need scheme1"));
                }
            }
            PlanConfig::Shapley { n_perm, n_outer, n_inner } => {
                if n_perm == 0 || n_outer == 0 || n_inner < 2 {
                    return Err(bad("Shapley plans need n_perm ≥ 1, n_outer ≥ 1, n_inner ≥ 2"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.switch_probability) {
            return Err(bad("switch_probability must lie in [0, 1]"));
        }
        if self.checkpoints.is_empty() {
            return Err(bad("no checkpoints"));
        }
        let mut seen = self.checkpoints.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.checkpoints.len() {
            return Err(bad("duplicate checkpoints"));
        }
        if self.mask.images_per_class == 0 || self.mask.repeats == 0 {
            return Err(bad("mask.images_per_class and mask.repeats must be positive"));
        }
        let cs = &self.class_sense;
        if cs.top_k == 0 || cs.images_per_class == 0 || cs.trials < 4 {
            return Err(bad("class_sense needs top_k ≥ 1, images_per_class ≥ 1, trials ≥ 4"));
        }
        if cs.kinds.contains(&SensitivityKind::SobolTotal) {
            return Err(bad("class_sense.kinds cannot include sobol-total"));
        }
        if self.segment.channels.is_empty() {
            return Err(bad("segment.channels is empty"));
        }
        if self.report.lda_folds < 2 || self.report.lda_repeats == 0 {
            return Err(bad("report needs lda_folds ≥ 2 and lda_repeats ≥ 1"));
        }
        Ok(())
    }

    /// The store root: `AUGSENS_STORE` when set, else `output`.
    pub fn store_root(&self) -> PathBuf {
        match std::env::var_os(STORE_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "augmentation_set": "A1",
        "plan": {"kind": "saltelli", "n_base": 4},
        "checkpoints": ["c1", "logits"],
        "output": "out"
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.scheme, Scheme::Independent);
        assert_eq!(cfg.mask.repeats, 3);
        assert_eq!(cfg.class_sense.top_k, 5);
        assert_eq!(cfg.segment.channels.len(), 3);
        assert!(!cfg.persist_activations);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_plans() {
        let extra = MINIMAL.replace("\"output\"", "\"colour\": 1, \"output\"");
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let nested = MINIMAL.replace("\"n_base\": 4", "\"n_base\": 4, \"x\": 1");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let odd = MINIMAL.replace("\"n_base\": 4", "\"n_base\": 6");
        assert!(ExperimentConfig::from_json(&odd).is_err());
        let scheme2 = MINIMAL.replace("\"output\"", "\"scheme\": \"scheme2\", \"output\"");
        assert!(ExperimentConfig::from_json(&scheme2).is_err());
        let missing = MINIMAL.replace("\"checkpoints\"", "\"dataset\": \"/nonexistent/x.aswt\", \"checkpoints\"");
        assert!(ExperimentConfig::from_json(&missing).is_err());
    }
}
