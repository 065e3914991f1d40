//! Producers of [`Prediction`]s: the exact oracle, a noisy oracle and a
//! trainable per-pixel MLP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::clustering::Prediction;
use crate::geometry::FEATURE_DIM;
use crate::grid::Grid;
use crate::losses::PredictionLogits;
use crate::rng::{stream, streams};

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{
    build_inputs, forward_inputs, mlp_backward, mlp_forward, mlp_gradient_check, Dense, MlpCache,
    MlpCheckReport, MlpGradients, MlpModel, HIDDEN, INPUT_DIM, OUTPUT_DIM,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid noise settings: {0}")]
    InvalidNoise(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logit magnitude used for saturated oracle classification heads.
pub const ORACLE_LOGIT: f64 = 50.0;

/// How feature noise is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BoundMode {
    /// iid normal per channel with `sigma_xi`.
    Gaussian,
    /// Uniform in the open 9-ball of the given radius; `sigma_xi` is unused.
    UniformBall { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma_xi: f64,
    pub sigma_b: f64,
    pub sigma_eta: f64,
    /// Probability of inverting each pixel's foreground probability.
    pub flip_rate: f64,
    pub bound: BoundMode,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_xi: 0.0,
            sigma_b: 0.0,
            sigma_eta: 0.0,
            flip_rate: 0.0,
            bound: BoundMode::Gaussian,
        }
    }
}

impl NoiseSpec {
    pub fn ball(radius: f64) -> Self {
        Self {
            bound: BoundMode::UniformBall { radius },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let radius = match self.bound {
            BoundMode::UniformBall { radius } => radius,
            BoundMode::Gaussian => 0.0,
        };
        for (name, v) in [
            ("sigma_xi", self.sigma_xi),
            ("sigma_b", self.sigma_b),
            ("sigma_eta", self.sigma_eta),
            ("radius", radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PredictorError::InvalidNoise(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(PredictorError::InvalidNoise(format!(
                "flip_rate must lie in [0, 1], got {}",
                self.flip_rate
            )));
        }
        Ok(())
    }
}

/// The ground truth restated as a prediction.
pub fn oracle_predict(ann: &Annotation) -> Prediction {
    let prob = |m: &Grid<u8>| m.map(|v| if v != 0 { 1.0 } else { 0.0 });
    Prediction {
        xi_hat: ann.xi_map.clone(),
        eta_hat: prob(&ann.eta_gt),
        b_hat: ann.b_map.clone(),
        mask_prob: prob(&ann.fg_mask),
    }
}

/// The ground truth as saturated logits.
pub fn oracle_logits(ann: &Annotation) -> PredictionLogits {
    let sat = |m: &Grid<u8>| {
        let data = m
            .as_slice()
            .iter()
            .flat_map(|&v| {
                if v != 0 {
                    [-ORACLE_LOGIT, ORACLE_LOGIT]
                } else {
                    [ORACLE_LOGIT, -ORACLE_LOGIT]
                }
            })
            .collect();
        Grid::from_vec(m.height(), m.width(), 2, data).expect("shape")
    };
    PredictionLogits {
        xi_hat: ann.xi_map.clone(),
        b_hat: ann.b_map.clone(),
        eta_logits: sat(&ann.eta_gt),
        mask_logits: sat(&ann.fg_mask),
    }
}

/// Oracle prediction perturbed per `spec`, deterministic in `seed`.
pub fn noisy_predict(
    ann: &Annotation,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<Prediction, PredictorError> {
    noisy_predict_with(ann, spec, &mut stream(seed, streams::NOISE))
}

/// [`noisy_predict`] drawing from an explicit generator.
pub fn noisy_predict_with(
    ann: &Annotation,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction, PredictorError> {
    spec.validate()?;
    let mut pred = oracle_predict(ann);
    let normal = |s: f64| Normal::new(0.0, s).expect("validated");

    match spec.bound {
        BoundMode::Gaussian if spec.sigma_xi > 0.0 => {
            let n = normal(spec.sigma_xi);
            pred.xi_hat
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v += n.sample(rng));
        }
        BoundMode::UniformBall { radius } if radius > 0.0 => {
            for i in 0..pred.xi_hat.len_pixels() {
                let truth: [f64; FEATURE_DIM] = ann.xi_map.at(i).try_into().expect("9 channels");
                // Resample until the stored offset is strictly inside the ball.
                loop {
                    let dir: [f64; FEATURE_DIM] =
                        std::array::from_fn(|_| StandardNormal.sample(rng));
                    let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                    let r = radius * rng.random::<f64>().powf(1.0 / FEATURE_DIM as f64);
                    let out = pred.xi_hat.at_mut(i);
                    for c in 0..FEATURE_DIM {
                        out[c] = truth[c] + r * dir[c] / len;
                    }
                    let dist = out
                        .iter()
                        .zip(&truth)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if len > 0.0 && dist < radius {
                        break;
                    }
                }
            }
        }
        _ => {}
    }
    if spec.sigma_b > 0.0 {
        let n = normal(spec.sigma_b);
        pred.b_hat
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (*v + n.sample(rng)).max(0.0));
    }
    if spec.sigma_eta > 0.0 {
        let n = normal(spec.sigma_eta);
        pred.eta_hat
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
    }
    if spec.flip_rate > 0.0 {
        for v in pred.mask_prob.as_mut_slice() {
            if rng.random::<f64>() < spec.flip_rate {
                *v = 1.0 - *v;
            }
        }
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotate, AnnotationConfig};
    use crate::clustering::{same_partition, segment};
    use crate::losses::{total_loss, LossWeights};
    use crate::scenegen::{render, sample_scene, GeneratorConfig, Scene};

    fn case(seed: u64) -> Annotation {
        let cfg = GeneratorConfig {
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        };
        let scene = sample_scene(seed, &cfg).unwrap();
        annotate(&scene, &render(&scene), &AnnotationConfig::default()).unwrap()
    }

    #[test]
    fn oracle_segments_into_ground_truth() {
        for seed in 0..5 {
            let ann = case(seed);
            let seg = segment(&oracle_predict(&ann), 0.5).unwrap();
            assert!(
                same_partition(&seg.labels, &ann.instance_map),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn empty_scene_has_empty_foreground() {
        let cfg = GeneratorConfig::default();
        let scene = Scene::new(cfg.camera().unwrap(), vec![]);
        let ann = annotate(&scene, &render(&scene), &AnnotationConfig::default()).unwrap();
        let pred = oracle_predict(&ann);
        assert!(pred.mask_prob.as_slice().iter().all(|&p| p == 0.0));
        assert_eq!(segment(&pred, 0.5).unwrap().num_instances(), 0);
    }

    #[test]
    fn oracle_logits_zero_geometric_loss() {
        let ann = case(3);
        let out = total_loss(&oracle_logits(&ann), &ann, &LossWeights::default()).unwrap();
        assert_eq!((out.l_p, out.l_var, out.l_vio), (0.0, 0.0, 0.0));
        assert!(out.total < 1e-6);
        let from_logits = oracle_logits(&ann).to_prediction();
        let oracle = oracle_predict(&ann);
        assert_eq!(from_logits.xi_hat, oracle.xi_hat);
        for (a, b) in from_logits
            .mask_prob
            .as_slice()
            .iter()
            .zip(oracle.mask_prob.as_slice())
        {
            assert!((a - b).abs() < 1e-40);
        }
    }

    #[test]
    fn zero_noise_is_oracle() {
        let ann = case(1);
        assert_eq!(
            noisy_predict(&ann, &NoiseSpec::default(), 9).unwrap(),
            oracle_predict(&ann)
        );
        assert_eq!(
            noisy_predict(&ann, &NoiseSpec::ball(0.0), 9).unwrap(),
            oracle_predict(&ann)
        );
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let ann = case(2);
        let spec = NoiseSpec {
            sigma_xi: 0.01,
            sigma_b: 0.01,
            sigma_eta: 0.1,
            flip_rate: 0.05,
            bound: BoundMode::Gaussian,
        };
        let a = noisy_predict(&ann, &spec, 4).unwrap();
        assert_eq!(a, noisy_predict(&ann, &spec, 4).unwrap());
        assert_ne!(a, noisy_predict(&ann, &spec, 5).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn ball_noise_stays_inside_radius() {
        let ann = case(6);
        let r = 0.49 * ann.min_radius().unwrap();
        for seed in 0..20 {
            let pred = noisy_predict(&ann, &NoiseSpec::ball(r), seed).unwrap();
            for i in (0..32 * 32).filter(|&i| ann.is_foreground(i)) {
                let d: f64 = pred
                    .xi_hat
                    .at(i)
                    .iter()
                    .zip(ann.xi_map.at(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d < r);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let ann = case(0);
        for spec in [
            NoiseSpec {
                sigma_xi: -1.0,
                ..Default::default()
            },
            NoiseSpec {
                flip_rate: 1.5,
                ..Default::default()
            },
            NoiseSpec::ball(f64::NAN),
        ] {
            assert!(noisy_predict(&ann, &spec, 0).is_err());
        }
    }
}
