use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::scene::SceneConfig;
use crate::losses::LossWeights;
use crate::model::DetectorConfig;
use crate::msm::MsmConfig;
use crate::sampling::{ShapeScale, ShapeScalePreset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over the run.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip, disabled when not positive.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-3,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// How the matching distribution is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingObjective {
    #[default]
    Classification,
    /// L1 regression of the expected shape&scale.
    ExpectedL1,
}

/// Everything a run needs. Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub category: String,
    /// Replaces the category's preset list when present.
    pub presets: Option<Vec<ShapeScale>>,
    pub model: DetectorConfig,
    pub scene: SceneConfig,
    pub loss: LossWeights,
    pub msm: MsmConfig,
    pub matching_objective: MatchingObjective,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// Steps between report rows; the last step is always reported.
    pub eval_interval: usize,
    /// Held-out scenes scored at every report row.
    pub eval_scenes: usize,
    /// Train on one scene repeatedly instead of a fresh scene per step.
    pub fixed_scene: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            category: "car".into(),
            presets: None,
            model: DetectorConfig::default(),
            scene: SceneConfig::default(),
            loss: LossWeights::default(),
            msm: MsmConfig::default(),
            matching_objective: MatchingObjective::default(),
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            eval_interval: 250,
            eval_scenes: 50,
            fixed_scene: false,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn presets(&self) -> Result<ShapeScalePreset> {
        match &self.presets {
            Some(entries) => ShapeScalePreset::new(entries.clone()),
            None => ShapeScalePreset::for_category(&self.category)
                .ok_or_else(|| Error::Config(format!("unknown category {:?}", self.category))),
        }
    }

    /// Sets the matching-loss weight in both places it is read from.
    pub fn set_lambda(&mut self, lambda: f64) {
        self.loss.lambda_msm = lambda;
        self.msm.lambda_msm = lambda;
    }

    pub fn lambda(&self) -> f64 {
        self.loss.lambda_msm
    }

    pub fn validate(&self) -> Result<()> {
        self.presets()?;
        self.model.validate()?;
        self.scene.validate()?;
        self.loss.validate()?;
        self.msm.validate()?;
        if self.loss.lambda_msm != self.msm.lambda_msm {
            return Err(Error::Config(format!(
                "loss.lambda_msm ({}) and msm.lambda_msm ({}) disagree",
                self.loss.lambda_msm, self.msm.lambda_msm
            )));
        }
        if self.scene.channels != self.model.channels {
            return Err(Error::Config(format!(
                "scene.channels ({}) must equal model.channels ({})",
                self.scene.channels, self.model.channels
            )));
        }
        if self.scene.classes != self.model.classes {
            return Err(Error::Config("scene.classes must equal model.classes".into()));
        }
        if self.scene.max_objects > self.model.queries {
            return Err(Error::Config(format!(
                "scene.max_objects ({}) exceeds model.queries ({})",
                self.scene.max_objects, self.model.queries
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} is invalid", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("momentum and betas must lie in [0, 1)".into()));
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::Config("optimizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Derives an independent stream seed from a root seed, a stream id and an
/// index (splitmix64 finalizer over the mixed inputs).
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.presets().unwrap(), ShapeScalePreset::car());
    }

    #[test]
    fn rejects_inconsistent_values() {
        let mut cfg = RunConfig::default();
        cfg.model.heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.msm.lambda_msm = 0.3;
        assert!(cfg.validate().is_err());
        cfg.set_lambda(0.3);
        cfg.validate().unwrap();

        let mut cfg = RunConfig::default();
        cfg.category = "tram".into();
        assert!(cfg.validate().is_err());

        assert!(serde_json::from_str::<RunConfig>(r#"{"optimizer": {"kind": "rmsprop"}}"#).is_err());
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_eq!(derive_seed(7, 3, 9), derive_seed(7, 3, 9));
    }
}
