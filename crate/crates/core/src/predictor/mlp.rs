//! Per-pixel multilayer perceptron with hand-written backpropagation.
//!
//! Every pixel is an independent sample with inputs
//! `(r, g, b, x, y, z, depth, u/W, v/H, 1)`. Two ReLU layers feed a linear
//! head whose 14 outputs split into the ξ̂ (9), B̂ (1), seed logits (2) and
//! mask logits (2) heads.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, StandardNormal};

use super::PredictorError;
use crate::annotation::Annotation;
use crate::geometry::FEATURE_DIM;
use crate::grid::Grid;
use crate::losses::{total_loss, LossGradients, LossWeights, PredictionLogits};
use crate::rng::{stream, streams};
use crate::scenegen::FrameBundle;

pub const INPUT_DIM: usize = 10;
pub const HIDDEN: [usize; 2] = [64, 64];
pub const OUTPUT_DIM: usize = FEATURE_DIM + 1 + 2 + 2;

const B_COL: usize = FEATURE_DIM;
const ETA_COLS: usize = FEATURE_DIM + 1;
const MASK_COLS: usize = FEATURE_DIM + 3;

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-per-sample application: `X Wᵀ + 1 bᵀ`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weight.transpose();
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }
}

/// Layers in order; ReLU after every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
}

/// Parameter gradients share the model's layout.
pub type MlpGradients = MlpModel;

impl MlpModel {
    /// All-zero model with the given layer widths.
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn standard_sizes() -> Vec<usize> {
        let mut s = vec![INPUT_DIM];
        s.extend(HIDDEN);
        s.push(OUTPUT_DIM);
        s
    }

    /// He-normal hidden layers, `1/sqrt(fan_in)` head, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut model = Self::zeros(&Self::standard_sizes());
        let mut rng = stream(seed, streams::INIT);
        let n = model.layers.len();
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let gain = if l + 1 == n { 1.0 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / layer.inputs() as f64).sqrt()).expect("valid");
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = dist.sample(&mut rng));
        }
        model
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// `(outputs, inputs)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.outputs(), l.inputs()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in a fixed order: per layer, weights (column-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    /// Mutable views in [`MlpModel::params`] order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.weight
                .as_mut_slice()
                .iter_mut()
                .chain(l.bias.as_mut_slice().iter_mut())
        })
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), PredictorError> {
        if values.len() != self.num_params() {
            return Err(PredictorError::ShapeMismatch(format!(
                "{} parameters supplied for a model with {}",
                values.len(),
                self.num_params()
            )));
        }
        self.params_mut().zip(values).for_each(|(p, v)| *p = *v);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let shapes = self.layer_shapes();
        if shapes.is_empty() || shapes.windows(2).any(|w| w[0].0 != w[1].1) {
            return Err(PredictorError::ShapeMismatch(format!(
                "inconsistent layers {shapes:?}"
            )));
        }
        if shapes[0].1 != INPUT_DIM || shapes[shapes.len() - 1].0 != OUTPUT_DIM {
            return Err(PredictorError::ShapeMismatch(format!(
                "model must map {INPUT_DIM} inputs to {OUTPUT_DIM} outputs, got {shapes:?}"
            )));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(PredictorError::NonFinite { layer: 0 });
        }
        Ok(())
    }
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    height: usize,
    width: usize,
    /// Input of every layer; `inputs[0]` is the pixel feature matrix.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<DMatrix<f64>>,
}

/// `H·W × 10` input matrix, one row per pixel in row-major order.
pub fn build_inputs(frame: &FrameBundle) -> DMatrix<f64> {
    let (h, w) = (frame.height(), frame.width());
    DMatrix::from_fn(h * w, INPUT_DIM, |i, c| {
        let (v, u) = (i / w, i % w);
        match c {
            0..=2 => frame.rgb.at(i)[c],
            3..=5 => frame.xyz.at(i)[c - 3],
            6 => frame.depth.value(i),
            7 => u as f64 / w as f64,
            8 => v as f64 / h as f64,
            _ => 1.0,
        }
    })
}

/// Runs the network on a frame.
pub fn mlp_forward(
    model: &MlpModel,
    frame: &FrameBundle,
) -> Result<(PredictionLogits, MlpCache), PredictorError> {
    forward_inputs(model, build_inputs(frame), frame.height(), frame.width())
}

/// Runs the network on an explicit `H·W × 10` input matrix.
pub fn forward_inputs(
    model: &MlpModel,
    x: DMatrix<f64>,
    height: usize,
    width: usize,
) -> Result<(PredictionLogits, MlpCache), PredictorError> {
    if x.nrows() != height * width || x.ncols() != INPUT_DIM {
        return Err(PredictorError::ShapeMismatch(format!(
            "input is {}x{}, expected {}x{INPUT_DIM}",
            x.nrows(),
            x.ncols(),
            height * width
        )));
    }
    let n = model.layers.len();
    let mut inputs = vec![x];
    let mut pre = Vec::with_capacity(n - 1);
    let mut out = None;
    for (l, layer) in model.layers.iter().enumerate() {
        let z = layer.apply(inputs.last().expect("input"));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::NonFinite { layer: l });
        }
        if l + 1 == n {
            out = Some(z);
        } else {
            inputs.push(z.map(|v| v.max(0.0)));
            pre.push(z);
        }
    }
    let out = out.expect("at least one layer");
    let split = |from: usize, to: usize| {
        let data = (0..height * width)
            .flat_map(|i| (from..to).map(move |c| (i, c)))
            .map(|(i, c)| out[(i, c)])
            .collect();
        Grid::from_vec(height, width, to - from, data).expect("shape")
    };
    let logits = PredictionLogits {
        xi_hat: split(0, FEATURE_DIM),
        b_hat: split(B_COL, B_COL + 1),
        eta_logits: split(ETA_COLS, ETA_COLS + 2),
        mask_logits: split(MASK_COLS, MASK_COLS + 2),
    };
    Ok((
        logits,
        MlpCache {
            height,
            width,
            inputs,
            pre,
        },
    ))
}

/// Backpropagates loss gradients through the cached forward pass.
pub fn mlp_backward(
    model: &MlpModel,
    cache: &MlpCache,
    grads: &LossGradients,
) -> Result<MlpGradients, PredictorError> {
    let (h, w) = (cache.height, cache.width);
    let fields = [
        (&grads.xi_hat, 0usize),
        (&grads.b_hat, B_COL),
        (&grads.eta_logits, ETA_COLS),
        (&grads.mask_logits, MASK_COLS),
    ];
    if fields
        .iter()
        .any(|(g, _)| g.height() != h || g.width() != w)
        || cache.inputs.len() != model.layers.len()
    {
        return Err(PredictorError::ShapeMismatch(format!(
            "gradients do not match the cached {h}x{w} forward pass"
        )));
    }
    let mut dz = DMatrix::zeros(h * w, OUTPUT_DIM);
    for (g, offset) in fields {
        for (i, px) in g.pixels().enumerate() {
            for (c, v) in px.iter().enumerate() {
                dz[(i, offset + c)] = *v;
            }
        }
    }

    let mut out = model.zeros_like();
    for l in (0..model.layers.len()).rev() {
        let input = &cache.inputs[l];
        out.layers[l].weight = dz.transpose() * input;
        out.layers[l].bias = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
        if l > 0 {
            let mut dh = &dz * &model.layers[l].weight;
            dh.zip_apply(&cache.pre[l - 1], |d, z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            dz = dh;
        }
    }
    Ok(out)
}

/// Outcome of [`mlp_gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCheckReport {
    pub max_rel_error: f64,
    pub directions: usize,
}

/// Checks [`mlp_backward`] composed with [`total_loss`] against central
/// differences along random unit directions, drawn separately inside every
/// weight and bias block.
pub fn mlp_gradient_check(
    model: &MlpModel,
    frame: &FrameBundle,
    ann: &Annotation,
    weights: &LossWeights,
    per_block: usize,
    seed: u64,
) -> Result<MlpCheckReport, crate::Error> {
    const EPS: f64 = 1e-6;
    let loss = |m: &MlpModel| -> Result<f64, crate::Error> {
        let (out, _) = mlp_forward(m, frame)?;
        Ok(total_loss(&out, ann, weights)?.total)
    };
    let (out, cache) = mlp_forward(model, frame)?;
    let analytic = mlp_backward(model, &cache, &total_loss(&out, ann, weights)?.grads)?.params();
    let base = model.params();

    let mut blocks = Vec::new();
    let mut start = 0;
    for l in &model.layers {
        for len in [l.weight.len(), l.bias.len()] {
            blocks.push(start..start + len);
            start += len;
        }
    }
    let mut rng = stream(seed, streams::GRADCHECK + 2);
    let mut report = MlpCheckReport {
        max_rel_error: 0.0,
        directions: 0,
    };
    let mut probe = model.clone();
    for block in blocks {
        for _ in 0..per_block {
            let dir: Vec<f64> = block
                .clone()
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let mut p = base.clone();
            let mut shifted = |sign: f64| -> Result<f64, crate::Error> {
                for (k, d) in block.clone().zip(&dir) {
                    p[k] = base[k] + sign * EPS * d / norm;
                }
                probe.set_params(&p)?;
                loss(&probe)
            };
            let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * EPS);
            let projected: f64 = block
                .clone()
                .zip(&dir)
                .map(|(k, d)| analytic[k] * d / norm)
                .sum();
            let rel = (projected - numeric).abs() / numeric.abs().max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.directions += 1;
        }
    }
    Ok(report)
}
