//! Training objective and its analytic gradients.
//!
//! ```text
//! L = λs·Ls + λcen·Lcen + Lp + λvar·Lvar + λvio·Lvio
//! ```
//!
//! * `Ls`   softmax cross entropy of the fg/bg mask head, mean over all pixels.
//! * `Lcen` softmax cross entropy of the seed head, mean over foreground pixels.
//! * `Lp`   `λp · (λxi · mean‖ξ̂−ξ‖² + λB · mean(B̂−B)²)` over foreground pixels.
//! * `Lvar` `Σ_k (1/N_k) Σ_{p∈k} ‖ξ̂_p − mean_k ξ̂‖²`.
//! * `Lvio` `Σ_p 1{‖ξ̂_p−ξ_p‖ > λv·B_p} · ‖ξ̂_p−ξ_p‖`, the indicator held constant
//!   when differentiating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::clustering::Prediction;
use crate::geometry::FEATURE_DIM;
use crate::grid::Grid;

mod gradcheck;
pub use gradcheck::{
    check_frame_config, finite_diff_check, finite_diff_check_against, random_check_case,
    Coordinate, Field, GradCheckConfig, GradCheckReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction is {got_h}x{got_w} but the annotation is {want_h}x{want_w}")]
    ShapeMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_cen: f64,
    pub lambda_var: f64,
    pub lambda_vio: f64,
    /// Overall multiplier of the pixel-wise term.
    pub lambda_p: f64,
    pub lambda_xi: f64,
    pub lambda_b: f64,
    /// Violation threshold as a fraction of the enclosing radius.
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_cen: 1.0,
            lambda_var: 1.0,
            lambda_vio: 1.0,
            lambda_p: 100.0,
            lambda_xi: 1.0,
            lambda_b: 10.0,
            lambda_v: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_s,
            self.lambda_cen,
            self.lambda_var,
            self.lambda_vio,
            self.lambda_p,
            self.lambda_xi,
            self.lambda_b,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(LossError::InvalidWeights(
                "every weight must be finite and non-negative".into(),
            ));
        }
        if !(self.lambda_v > 0.0 && self.lambda_v <= 1.0) {
            return Err(LossError::InvalidWeights(format!(
                "lambda_v must lie in (0, 1], got {}",
                self.lambda_v
            )));
        }
        Ok(())
    }
}

/// Raw network outputs: features and radius directly, the two
/// classification heads as 2-channel logits (channel 1 = positive class).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionLogits {
    pub xi_hat: Grid<f64>,
    pub b_hat: Grid<f64>,
    pub eta_logits: Grid<f64>,
    pub mask_logits: Grid<f64>,
}

/// Gradient of the loss with respect to every field of [`PredictionLogits`].
pub type LossGradients = PredictionLogits;

impl PredictionLogits {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            xi_hat: Grid::zeros(height, width, FEATURE_DIM),
            b_hat: Grid::zeros(height, width, 1),
            eta_logits: Grid::zeros(height, width, 2),
            mask_logits: Grid::zeros(height, width, 2),
        }
    }

    pub fn height(&self) -> usize {
        self.b_hat.height()
    }

    pub fn width(&self) -> usize {
        self.b_hat.width()
    }

    /// Converts logits to probabilities (softmax channel 1) and clamps the
    /// radius at zero.
    pub fn to_prediction(&self) -> Prediction {
        let prob = |logits: &Grid<f64>| {
            let data = logits.pixels().map(|l| softmax2(l[0], l[1])[1]).collect();
            Grid::from_vec(logits.height(), logits.width(), 1, data).expect("shape")
        };
        Prediction {
            xi_hat: self.xi_hat.clone(),
            eta_hat: prob(&self.eta_logits),
            b_hat: self.b_hat.map(|b| b.max(0.0)),
            mask_prob: prob(&self.mask_logits),
        }
    }

    fn check_against(&self, ann: &Annotation) -> Result<(), LossError> {
        let (h, w) = (ann.height(), ann.width());
        let ok = self.xi_hat.shape() == [h, w, FEATURE_DIM]
            && self.b_hat.shape() == [h, w, 1]
            && self.eta_logits.shape() == [h, w, 2]
            && self.mask_logits.shape() == [h, w, 2];
        if ok {
            Ok(())
        } else {
            Err(LossError::ShapeMismatch {
                got_h: self.height(),
                got_w: self.width(),
                want_h: h,
                want_w: w,
            })
        }
    }
}

/// A scalar loss term with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Grid<f64>,
}

#[inline]
fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let lse = log_sum_exp2(a, b);
    [(a - lse).exp(), (b - lse).exp()]
}

/// Mean softmax cross entropy over the pixels selected by `include`.
fn cross_entropy(logits: &Grid<f64>, target: &Grid<u8>, include: impl Fn(usize) -> bool) -> Term {
    let n_pix = logits.len_pixels();
    let selected: Vec<usize> = (0..n_pix).filter(|&i| include(i)).collect();
    let mut grad = Grid::zeros(logits.height(), logits.width(), 2);
    if selected.is_empty() {
        return Term { value: 0.0, grad };
    }
    let n = selected.len() as f64;
    let mut value = 0.0;
    for &i in &selected {
        let l = logits.at(i);
        let y = usize::from(target.value(i) != 0);
        let lse = log_sum_exp2(l[0], l[1]);
        value += lse - l[y];
        let g = grad.at_mut(i);
        for c in 0..2 {
            let p = (l[c] - lse).exp();
            g[c] = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Term {
        value: value / n,
        grad,
    }
}

/// Foreground/background cross entropy averaged over every pixel.
pub fn semantic_mask_loss(mask_logits: &Grid<f64>, fg_gt: &Grid<u8>) -> Term {
    cross_entropy(mask_logits, fg_gt, |_| true)
}

/// Seed-candidate cross entropy averaged over ground-truth foreground pixels.
pub fn center_loss(eta_logits: &Grid<f64>, eta_gt: &Grid<u8>, fg_gt: &Grid<u8>) -> Term {
    cross_entropy(eta_logits, eta_gt, |i| fg_gt.value(i) != 0)
}

/// Pixel-wise regression term and its two gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTerm {
    pub value: f64,
    pub grad_xi: Grid<f64>,
    pub grad_b: Grid<f64>,
}

/// `λxi · mean‖ξ̂−ξ‖² + λB · mean(B̂−B)²` over ground-truth foreground.
pub fn pixel_loss(
    xi_hat: &Grid<f64>,
    b_hat: &Grid<f64>,
    ann: &Annotation,
    lambda_xi: f64,
    lambda_b: f64,
) -> PixelTerm {
    let (h, w) = (ann.height(), ann.width());
    let mut grad_xi = Grid::zeros(h, w, FEATURE_DIM);
    let mut grad_b = Grid::zeros(h, w, 1);
    let n_fg = ann.foreground_count();
    if n_fg == 0 {
        return PixelTerm {
            value: 0.0,
            grad_xi,
            grad_b,
        };
    }
    let n = n_fg as f64;
    let (mut sum_xi, mut sum_b) = (0.0, 0.0);
    for i in (0..h * w).filter(|&i| ann.is_foreground(i)) {
        let g = grad_xi.at_mut(i);
        for (c, (p, t)) in xi_hat.at(i).iter().zip(ann.xi_map.at(i)).enumerate() {
            let d = p - t;
            sum_xi += d * d;
            g[c] = lambda_xi * 2.0 * d / n;
        }
        let db = b_hat.value(i) - ann.b_map.value(i);
        sum_b += db * db;
        grad_b.as_mut_slice()[i] = lambda_b * 2.0 * db / n;
    }
    PixelTerm {
        value: lambda_xi * sum_xi / n + lambda_b * sum_b / n,
        grad_xi,
        grad_b,
    }
}

/// Within-object feature variance, summed over objects.
pub fn variance_loss(xi_hat: &Grid<f64>, instance_map: &Grid<u32>) -> Term {
    let max_label = instance_map.as_slice().iter().copied().max().unwrap_or(0) as usize;
    // Deviations are taken relative to each object's first pixel so that
    // constant objects give exactly zero.
    let mut origin: Vec<Option<usize>> = vec![None; max_label + 1];
    let mut sums = vec![[0.0f64; FEATURE_DIM]; max_label + 1];
    let mut counts = vec![0usize; max_label + 1];
    for (i, &l) in instance_map.as_slice().iter().enumerate() {
        if l > 0 {
            let o = *origin[l as usize].get_or_insert(i);
            counts[l as usize] += 1;
            for ((s, v), r) in sums[l as usize]
                .iter_mut()
                .zip(xi_hat.at(i))
                .zip(xi_hat.at(o))
            {
                *s += v - r;
            }
        }
    }
    let means: Vec<[f64; FEATURE_DIM]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { *s } else { s.map(|v| v / n as f64) })
        .collect();

    let mut grad = Grid::zeros(xi_hat.height(), xi_hat.width(), FEATURE_DIM);
    let mut value = 0.0;
    for (i, &l) in instance_map.as_slice().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (mean, n) = (&means[l as usize], counts[l as usize] as f64);
        let r = xi_hat.at(origin[l as usize].expect("labelled pixel"));
        let g = grad.at_mut(i);
        for (c, v) in xi_hat.at(i).iter().enumerate() {
            let d = (v - r[c]) - mean[c];
            value += d * d / n;
            // The mean's own dependence on ξ̂_p cancels because deviations sum to zero.
            g[c] = 2.0 * d / n;
        }
    }
    Term { value, grad }
}

/// Norm of the feature error on foreground pixels where it exceeds `λv·B`.
pub fn violation_loss(xi_hat: &Grid<f64>, ann: &Annotation, lambda_v: f64) -> Term {
    let mut grad = Grid::zeros(xi_hat.height(), xi_hat.width(), FEATURE_DIM);
    let mut value = 0.0;
    for i in (0..xi_hat.len_pixels()).filter(|&i| ann.is_foreground(i)) {
        let diff: Vec<f64> = xi_hat
            .at(i)
            .iter()
            .zip(ann.xi_map.at(i))
            .map(|(p, t)| p - t)
            .collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > lambda_v * ann.b_map.value(i) {
            value += norm;
            for (g, d) in grad.at_mut(i).iter_mut().zip(&diff) {
                *g = d / norm;
            }
        }
    }
    Term { value, grad }
}

/// Every term of the objective plus the accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_cen: f64,
    /// Already multiplied by `λp`.
    pub l_p: f64,
    pub l_var: f64,
    pub l_vio: f64,
    pub total: f64,
    pub grads: LossGradients,
}

impl LossBreakdown {
    /// Total recomputed under different weights, reusing the unweighted terms.
    pub fn total_under(&self, from: &LossWeights, to: &LossWeights) -> f64 {
        let l_p = if from.lambda_p == to.lambda_p
            && from.lambda_xi == to.lambda_xi
            && from.lambda_b == to.lambda_b
        {
            self.l_p
        } else {
            f64::NAN
        };
        to.lambda_s * self.l_s
            + to.lambda_cen * self.l_cen
            + l_p
            + to.lambda_var * self.l_var
            + to.lambda_vio * self.l_vio
    }
}

/// Evaluates the full objective.
pub fn total_loss(
    pred: &PredictionLogits,
    ann: &Annotation,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    pred.check_against(ann)?;
    weights.validate()?;
    let s = semantic_mask_loss(&pred.mask_logits, &ann.fg_mask);
    let cen = center_loss(&pred.eta_logits, &ann.eta_gt, &ann.fg_mask);
    let p = pixel_loss(
        &pred.xi_hat,
        &pred.b_hat,
        ann,
        weights.lambda_xi,
        weights.lambda_b,
    );
    let var = variance_loss(&pred.xi_hat, &ann.instance_map);
    let vio = violation_loss(&pred.xi_hat, ann, weights.lambda_v);

    let l_p = weights.lambda_p * p.value;
    let total = weights.lambda_s * s.value
        + weights.lambda_cen * cen.value
        + l_p
        + weights.lambda_var * var.value
        + weights.lambda_vio * vio.value;

    let mut xi = p.grad_xi;
    for ((g, gv), gx) in xi
        .as_mut_slice()
        .iter_mut()
        .zip(var.grad.as_slice())
        .zip(vio.grad.as_slice())
    {
        *g = weights.lambda_p * *g + weights.lambda_var * gv + weights.lambda_vio * gx;
    }
    let scale = |mut g: Grid<f64>, k: f64| {
        g.as_mut_slice().iter_mut().for_each(|v| *v *= k);
        g
    };
    Ok(LossBreakdown {
        l_s: s.value,
        l_cen: cen.value,
        l_p,
        l_var: var.value,
        l_vio: vio.value,
        total,
        grads: LossGradients {
            xi_hat: xi,
            b_hat: scale(p.grad_b, weights.lambda_p),
            eta_logits: scale(cen.grad, weights.lambda_cen),
            mask_logits: scale(s.grad, weights.lambda_s),
        },
    })
}
