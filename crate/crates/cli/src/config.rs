//! Run configuration shared by every subcommand.
//!
//! Values come from the built-in defaults, then an optional JSON file, then
//! command-line flags.

use std::path::Path;

use clusterseg_core::annotation::AnnotationConfig;
use clusterseg_core::eval::EvalConfig;
use clusterseg_core::losses::LossWeights;
use clusterseg_core::predictor::{AdamState, NoiseSpec};
use clusterseg_core::scenegen::GeneratorConfig;
use clusterseg_core::training::{TrainConfig, WeightSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    /// Number of random frames checked.
    pub frames: usize,
    /// Side length of each square frame.
    pub size: usize,
    /// Coordinates sampled per frame.
    pub samples: usize,
    pub epsilon: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            frames: 3,
            size: 8,
            samples: 500,
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Option<WeightSchedule>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: AdamState::DEFAULT_LR,
            schedule: Some(WeightSchedule::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of scenes written by `gen`.
    pub count: usize,
    pub generator: GeneratorConfig,
    pub annotation: AnnotationConfig,
    /// Foreground probability threshold used by segmentation.
    pub fg_threshold: f64,
    pub noise: NoiseSpec,
    /// When set, uniform-ball noise with radius `ball_factor · min B` of
    /// each frame, overriding `noise.bound`.
    pub ball_factor: Option<f64>,
    pub loss: LossWeights,
    pub gradcheck: GradcheckSettings,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 8,
            generator: GeneratorConfig::default(),
            annotation: AnnotationConfig::default(),
            fg_threshold: 0.5,
            noise: NoiseSpec::default(),
            ball_factor: None,
            loss: LossWeights::default(),
            gradcheck: GradcheckSettings::default(),
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate().map_err(CliError::usage)?;
        self.annotation.validate().map_err(CliError::usage)?;
        self.noise.validate().map_err(CliError::usage)?;
        self.loss.validate().map_err(CliError::usage)?;
        self.eval.validate().map_err(CliError::usage)?;
        self.train_config().validate().map_err(CliError::usage)?;
        if !(0.0..1.0).contains(&self.fg_threshold) {
            return Err(CliError::Usage(format!(
                "fg_threshold must lie in [0, 1), got {}",
                self.fg_threshold
            )));
        }
        if let Some(f) = self.ball_factor {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(CliError::Usage(format!(
                    "ball_factor must be finite and >= 0, got {f}"
                )));
            }
        }
        let g = &self.gradcheck;
        if g.frames == 0 || g.size == 0 || g.samples == 0 {
            return Err(CliError::Usage(
                "gradcheck frames, size and samples must be positive".into(),
            ));
        }
        if !(1e-7..=1e-3).contains(&g.epsilon) {
            return Err(CliError::Usage(format!(
                "gradcheck epsilon must lie in [1e-7, 1e-3], got {}",
                g.epsilon
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            weights: self.loss.clone(),
            schedule: self.train.schedule.clone(),
            fg_threshold: self.fg_threshold,
            eval: self.eval.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trips() {
        let mut cfg = RunConfig {
            ball_factor: Some(0.49),
            ..Default::default()
        };
        cfg.train.schedule = None;
        cfg.generator.background_depth = Some(3.0);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(
            RunConfig::from_json(&RunConfig::default().to_json()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "loss": {"lambda_vio": 0.0}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.lambda_vio, 0.0);
        assert_eq!(cfg.loss.lambda_p, 100.0);
        assert_eq!(cfg.generator, GeneratorConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let d = RunConfig::default();
        assert_eq!(
            (d.train.epochs, d.train.batch_size, d.train.learning_rate),
            (30, 4, 1e-4)
        );
        let s = d.train.schedule.unwrap();
        assert_eq!(
            (s.after_epoch, s.lambda_var, s.lambda_vio),
            (5, 100.0, 100.0)
        );
        assert_eq!(d.loss.lambda_v, 0.2);
    }
}
