//! Central-difference verification of the analytic loss gradients.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use super::{
    center_loss, pixel_loss, semantic_mask_loss, total_loss, variance_loss, violation_loss,
    LossError, LossGradients, LossWeights, PredictionLogits,
};
use crate::annotation::{annotate, Annotation, AnnotationConfig};
use crate::geometry::FEATURE_DIM;
use crate::grid::Grid;
use crate::rng::{stream, streams};
use crate::scenegen::{render, sample_scene_with, GeneratorConfig, PlacementVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    XiHat,
    BHat,
    EtaLogits,
    MaskLogits,
}

impl Field {
    pub const ALL: [Field; 4] = [
        Field::XiHat,
        Field::BHat,
        Field::EtaLogits,
        Field::MaskLogits,
    ];

    fn grid(self, p: &PredictionLogits) -> &Grid<f64> {
        match self {
            Field::XiHat => &p.xi_hat,
            Field::BHat => &p.b_hat,
            Field::EtaLogits => &p.eta_logits,
            Field::MaskLogits => &p.mask_logits,
        }
    }

    fn grid_mut(self, p: &mut PredictionLogits) -> &mut Grid<f64> {
        match self {
            Field::XiHat => &mut p.xi_hat,
            Field::BHat => &mut p.b_hat,
            Field::EtaLogits => &mut p.eta_logits,
            Field::MaskLogits => &mut p.mask_logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 500,
            seed: 0,
        }
    }
}

/// One checked coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coordinate {
    pub field: Field,
    pub pixel: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped because they sit on the violation threshold.
    pub skipped: usize,
    /// Checked coordinates per field, in [`Field::ALL`] order.
    pub per_field: [usize; 4],
    /// Checked coordinates whose perturbation changes each weighted term,
    /// in `[s, cen, p, var, vio]` order.
    pub per_term: [usize; 5],
    pub worst: Option<Coordinate>,
}

/// Weighted contribution of each term.
fn weighted_terms(p: &PredictionLogits, ann: &Annotation, w: &LossWeights) -> [f64; 5] {
    [
        w.lambda_s * semantic_mask_loss(&p.mask_logits, &ann.fg_mask).value,
        w.lambda_cen * center_loss(&p.eta_logits, &ann.eta_gt, &ann.fg_mask).value,
        w.lambda_p * pixel_loss(&p.xi_hat, &p.b_hat, ann, w.lambda_xi, w.lambda_b).value,
        w.lambda_var * variance_loss(&p.xi_hat, &ann.instance_map).value,
        w.lambda_vio * violation_loss(&p.xi_hat, ann, w.lambda_v).value,
    ]
}

/// Compares the analytic gradient of [`total_loss`] with central differences
/// on randomly drawn coordinates.
pub fn finite_diff_check(
    pred: &PredictionLogits,
    ann: &Annotation,
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, LossError> {
    let grads = total_loss(pred, ann, weights)?.grads;
    finite_diff_check_against(pred, ann, weights, cfg, &grads)
}

/// Same as [`finite_diff_check`] but against caller-supplied gradients.
pub fn finite_diff_check_against(
    pred: &PredictionLogits,
    ann: &Annotation,
    weights: &LossWeights,
    cfg: &GradCheckConfig,
    analytic: &LossGradients,
) -> Result<GradCheckReport, LossError> {
    pred.check_against(ann)?;
    weights.validate()?;
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return Err(LossError::InvalidWeights(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {}",
            cfg.epsilon
        )));
    }
    let eps = cfg.epsilon;
    let n_pix = ann.height() * ann.width();
    let fg: Vec<usize> = (0..n_pix).filter(|&i| ann.is_foreground(i)).collect();
    let all: Vec<usize> = (0..n_pix).collect();
    let mut rng = stream(cfg.seed, streams::GRADCHECK);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        per_field: [0; 4],
        per_term: [0; 5],
        worst: None,
    };
    if n_pix == 0 {
        return Ok(report);
    }
    let mut probe = pred.clone();
    for s in 0..cfg.samples {
        let fi = s % Field::ALL.len();
        let field = Field::ALL[fi];
        let pool = match field {
            Field::MaskLogits => &all,
            _ if fg.is_empty() => &all,
            _ => &fg,
        };
        let pixel = *pool.choose(&mut rng).expect("non-empty pool");
        let channels = field.grid(pred).channels();
        let channel = rng.random_range(0..channels);

        if field == Field::XiHat && ann.is_foreground(pixel) {
            let norm = pred
                .xi_hat
                .at(pixel)
                .iter()
                .zip(ann.xi_map.at(pixel))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if (norm - weights.lambda_v * ann.b_map.value(pixel)).abs() < 10.0 * eps {
                report.skipped += 1;
                continue;
            }
        }

        let idx = pixel * channels + channel;
        let x0 = field.grid(pred).as_slice()[idx];
        field.grid_mut(&mut probe).as_mut_slice()[idx] = x0 + eps;
        let plus = weighted_terms(&probe, ann, weights);
        field.grid_mut(&mut probe).as_mut_slice()[idx] = x0 - eps;
        let minus = weighted_terms(&probe, ann, weights);
        field.grid_mut(&mut probe).as_mut_slice()[idx] = x0;

        let mut numeric = 0.0;
        for t in 0..5 {
            let d = plus[t] - minus[t];
            if d != 0.0 {
                report.per_term[t] += 1;
            }
            numeric += d / (2.0 * eps);
        }
        let a = field.grid(analytic).as_slice()[idx];
        let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        report.per_field[fi] += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(Coordinate {
                field,
                pixel,
                channel,
            });
        }
    }
    Ok(report)
}

/// Generator settings for the small random frames used by gradient checks.
pub fn check_frame_config(size: usize) -> GeneratorConfig {
    GeneratorConfig {
        width: size,
        height: size,
        focal: size as f64,
        objects: [2, 3],
        size_range: [0.12, 0.25],
        placement: PlacementVolume {
            x: [-0.2, 0.2],
            y: [-0.2, 0.2],
            z: [0.9, 1.3],
        },
        ..Default::default()
    }
}

/// A rendered `size×size` frame with its annotation and a random prediction.
///
/// Foreground features are offset from ground truth by `λv·B` times a factor
/// in `[0.2, 3]`, so both sides of the violation threshold are populated.
pub fn random_check_case(
    seed: u64,
    size: usize,
    lambda_v: f64,
) -> Result<(Annotation, PredictionLogits), crate::Error> {
    let cfg = check_frame_config(size);
    let mut rng = stream(seed, streams::GRADCHECK + 1);
    let scene = sample_scene_with(&mut rng, &cfg)?;
    let frame = render(&scene);
    let ann = annotate(&scene, &frame, &AnnotationConfig::default())?;

    let bg_xi = Normal::new(0.0, 0.3).expect("valid");
    let b_noise = Normal::new(0.0, 0.05).expect("valid");
    let logit = Normal::new(0.0, 1.5).expect("valid");
    let mut pred = PredictionLogits::zeros(size, size);
    for i in 0..size * size {
        if ann.is_foreground(i) {
            let dir: Vec<f64> = (0..FEATURE_DIM)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let r = lambda_v * ann.b_map.value(i) * rng.random_range(0.2..3.0);
            for (c, out) in pred.xi_hat.at_mut(i).iter_mut().enumerate() {
                *out = ann.xi_map.at(i)[c] + r * dir[c] / len;
            }
        } else {
            pred.xi_hat
                .at_mut(i)
                .iter_mut()
                .for_each(|v| *v = bg_xi.sample(&mut rng));
        }
        pred.b_hat.as_mut_slice()[i] = ann.b_map.value(i) + b_noise.sample(&mut rng);
        for g in [&mut pred.eta_logits, &mut pred.mask_logits] {
            g.at_mut(i)
                .iter_mut()
                .for_each(|v| *v = logit.sample(&mut rng));
        }
    }
    Ok((ann, pred))
}
