//! Mini-batch Adam training of the per-pixel MLP.
//!
//! Epochs are numbered from 1. After every epoch the whole dataset is
//! re-evaluated with the updated model; epoch 0 is the untrained model.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::clustering::{segment, ClusteringError};
use crate::eval::{compute_metrics, EvalConfig, EvalError, ImageRecord};
use crate::losses::{total_loss, LossError, LossWeights};
use crate::predictor::{
    adam_step, mlp_backward, mlp_forward, AdamState, Checkpoint, MlpModel, PredictorError,
};
use crate::rng::{stream, streams};
use crate::scenegen::FrameBundle;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One training image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frame: FrameBundle,
    pub ann: Annotation,
}

/// Replaces `λvar` and `λvio` once `after_epoch` epochs have completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSchedule {
    pub after_epoch: usize,
    pub lambda_var: f64,
    pub lambda_vio: f64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            after_epoch: 5,
            lambda_var: 100.0,
            lambda_vio: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds initialization and the per-epoch shuffles.
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: Option<WeightSchedule>,
    /// Foreground threshold used when segmenting for the per-epoch AP.
    pub fg_threshold: f64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: AdamState::DEFAULT_LR,
            seed: 0,
            weights: LossWeights::default(),
            schedule: Some(WeightSchedule::default()),
            fg_threshold: 0.5,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.fg_threshold) {
            return Err(TrainError::InvalidConfig(
                "fg_threshold must lie in [0, 1)".into(),
            ));
        }
        self.weights.validate()?;
        self.weights_for_epoch(self.epochs.max(1)).validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Weights in force during `epoch` (1-based).
    pub fn weights_for_epoch(&self, epoch: usize) -> LossWeights {
        let mut w = self.weights.clone();
        if let Some(s) = &self.schedule {
            if epoch > s.after_epoch {
                w.lambda_var = s.lambda_var;
                w.lambda_vio = s.lambda_vio;
            }
        }
        w
    }
}

/// Dataset means of each loss term after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub weights: LossWeights,
    /// Mean mini-batch objective seen during the epoch; NaN for epoch 0.
    pub train_total: f64,
    pub l_s: f64,
    pub l_cen: f64,
    pub l_p: f64,
    pub l_var: f64,
    pub l_vio: f64,
    /// Objective under this epoch's weights.
    pub total: f64,
    /// Objective under the unscheduled base weights, comparable across epochs.
    pub total_base: f64,
    pub ap: f64,
    pub ap50: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lambda_s,lambda_cen,lambda_var,lambda_vio,lambda_p,lambda_xi,lambda_b,lambda_v,\
train_total,l_s,l_cen,l_p,l_var,l_vio,total,total_base,ap,ap50";

    /// One CSV row; floats use the shortest round-trip representation.
    pub fn csv_row(&self) -> String {
        let w = &self.weights;
        let vals = [
            w.lambda_s,
            w.lambda_cen,
            w.lambda_var,
            w.lambda_vio,
            w.lambda_p,
            w.lambda_xi,
            w.lambda_b,
            w.lambda_v,
            self.train_total,
            self.l_s,
            self.l_cen,
            self.l_p,
            self.l_var,
            self.l_vio,
            self.total,
            self.total_base,
            self.ap,
            self.ap50,
        ];
        std::iter::once(self.epoch.to_string())
            .chain(vals.iter().map(|v| v.to_string()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Loss terms and AP of `model` on the whole dataset.
pub fn evaluate_model(
    model: &MlpModel,
    data: &[Sample],
    weights: &LossWeights,
    base: &LossWeights,
    cfg: &TrainConfig,
) -> Result<EpochLog, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let per_image = data
        .par_iter()
        .map(|s| -> Result<_, TrainError> {
            let (logits, _) = mlp_forward(model, &s.frame)?;
            let b = total_loss(&logits, &s.ann, weights)?;
            let seg = segment(&logits.to_prediction(), cfg.fg_threshold)?;
            let record = ImageRecord::from_frame(&seg, &s.frame)?;
            let base_total = b.total_under(weights, base);
            Ok((
                [b.l_s, b.l_cen, b.l_p, b.l_var, b.l_vio, b.total, base_total],
                record,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_image.len() as f64;
    let mut sums = [0.0; 7];
    for (terms, _) in &per_image {
        sums.iter_mut().zip(terms).for_each(|(s, t)| *s += t);
    }
    let m = sums.map(|s| s / n);
    let records: Vec<ImageRecord> = per_image.into_iter().map(|(_, r)| r).collect();
    let metrics = compute_metrics(&records, &cfg.eval)?;
    Ok(EpochLog {
        epoch: 0,
        weights: weights.clone(),
        train_total: f64::NAN,
        l_s: m[0],
        l_cen: m[1],
        l_p: m[2],
        l_var: m[3],
        l_vio: m[4],
        total: m[5],
        total_base: m[6],
        ap: metrics.ap,
        ap50: metrics.ap50,
    })
}

/// Mean gradient and mean objective over one mini-batch.
fn batch_gradient(
    model: &MlpModel,
    batch: &[&Sample],
    weights: &LossWeights,
) -> Result<(MlpModel, f64), TrainError> {
    let parts = batch
        .par_iter()
        .map(|s| -> Result<_, TrainError> {
            let (logits, cache) = mlp_forward(model, &s.frame)?;
            let b = total_loss(&logits, &s.ann, weights)?;
            Ok((mlp_backward(model, &cache, &b.grads)?, b.total))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut grad = model.zeros_like();
    let mut total = 0.0;
    for (g, t) in &parts {
        grad.params_mut().zip(g.params()).for_each(|(a, b)| *a += b);
        total += t;
    }
    grad.params_mut().for_each(|a| *a *= scale);
    Ok((grad, total * scale))
}

/// Order in which samples are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SHUFFLE + epoch as u64));
    idx
}

/// Runs training up to `cfg.epochs` total epochs, starting from `resume`
/// when given. `on_epoch` sees every log row and the checkpoint after it.
///
/// A resumed run takes its seed from the checkpoint.
pub fn train(
    data: &[Sample],
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint),
) -> Result<(Checkpoint, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut logs = Vec::new();
    let mut ck = match resume {
        Some(mut ck) => {
            ck.model.validate()?;
            let n = ck.model.num_params();
            let adam = ck
                .adam
                .get_or_insert_with(|| AdamState::with_lr(n, cfg.learning_rate));
            adam.lr = cfg.learning_rate;
            ck
        }
        None => {
            let model = MlpModel::init(cfg.seed);
            let adam = AdamState::with_lr(model.num_params(), cfg.learning_rate);
            let ck = Checkpoint {
                model,
                epochs_done: 0,
                seed: cfg.seed,
                adam: Some(adam),
            };
            let log = evaluate_model(
                &ck.model,
                data,
                &cfg.weights_for_epoch(0),
                &cfg.weights,
                cfg,
            )?;
            on_epoch(&log, &ck);
            logs.push(log);
            ck
        }
    };

    for epoch in ck.epochs_done as usize + 1..=cfg.epochs {
        let weights = cfg.weights_for_epoch(epoch);
        let order = epoch_order(ck.seed, epoch, data.len());
        let mut train_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (grad, total) = batch_gradient(&ck.model, &batch, &weights)?;
            adam_step(&mut ck.model, &grad, ck.adam.as_mut().expect("set above"))?;
            train_sum += total;
            batches += 1;
        }
        ck.model.validate()?;
        ck.epochs_done = epoch as u64;
        let mut log = evaluate_model(&ck.model, data, &weights, &cfg.weights, cfg)?;
        log.epoch = epoch;
        log.train_total = train_sum / batches as f64;
        on_epoch(&log, &ck);
        logs.push(log);
    }
    Ok((ck, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotate, AnnotationConfig};
    use crate::scenegen::{render, sample_scene, GeneratorConfig};

    fn dataset(n: u64) -> Vec<Sample> {
        let cfg = GeneratorConfig {
            width: 16,
            height: 16,
            focal: 16.0,
            size_range: [0.1, 0.2],
            ..Default::default()
        };
        (0..n)
            .map(|seed| {
                let scene = sample_scene(seed, &cfg).unwrap();
                let frame = render(&scene);
                let ann = annotate(&scene, &frame, &AnnotationConfig::default()).unwrap();
                Sample { frame, ann }
            })
            .collect()
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            schedule: Some(WeightSchedule {
                after_epoch: 2,
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    #[test]
    fn schedule_switches_after_the_configured_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.weights_for_epoch(5).lambda_var, 1.0);
        let w6 = cfg.weights_for_epoch(6);
        assert_eq!((w6.lambda_var, w6.lambda_vio), (100.0, 100.0));
        assert_eq!(w6.lambda_p, 100.0);
        let flat = TrainConfig {
            schedule: None,
            ..cfg
        };
        assert_eq!(flat.weights_for_epoch(30), LossWeights::default());
    }

    #[test]
    fn shuffles_are_permutations_and_vary_by_epoch() {
        let a = epoch_order(1, 1, 32);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(1, 2, 32));
        assert_eq!(a, epoch_order(1, 1, 32));
    }

    #[test]
    fn logs_cover_every_epoch_and_apply_the_schedule() {
        let data = dataset(6);
        let (ck, logs) = train(&data, &short(4), None, |_, _| {}).unwrap();
        assert_eq!(ck.epochs_done, 4);
        assert_eq!(
            logs.iter().map(|l| l.epoch).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(logs[0].train_total.is_nan());
        assert_eq!(logs[2].weights.lambda_var, 1.0);
        assert_eq!(
            (logs[3].weights.lambda_var, logs[3].weights.lambda_vio),
            (100.0, 100.0)
        );
        for l in &logs {
            let recomputed = l.l_s
                + l.l_cen
                + l.l_p
                + l.weights.lambda_var * l.l_var
                + l.weights.lambda_vio * l.l_vio;
            assert!((recomputed - l.total).abs() <= 1e-9 * l.total.abs());
            assert!(
                (l.l_s + l.l_cen + l.l_p + l.l_var + l.l_vio - l.total_base).abs()
                    <= 1e-9 * l.total_base
            );
        }
        let csv = logs_to_csv(&logs);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().all(|l| l.split(',').count() == 19));
    }

    #[test]
    fn training_reduces_the_loss() {
        let data = dataset(6);
        let (_, logs) = train(&data, &short(3), None, |_, _| {}).unwrap();
        assert!(logs[3].total_base < logs[0].total_base);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = dataset(5);
        let cfg = TrainConfig {
            batch_size: 2,
            ..short(4)
        };
        let (full, full_logs) = train(&data, &cfg, None, |_, _| {}).unwrap();
        let mut saved = None;
        let first_half = TrainConfig {
            epochs: 2,
            ..cfg.clone()
        };
        train(&data, &first_half, None, |l, ck| {
            if l.epoch == 2 {
                saved = Some(Checkpoint::from_bytes(&ck.to_bytes()).unwrap());
            }
        })
        .unwrap();
        let (resumed, resumed_logs) = train(&data, &cfg, saved, |_, _| {}).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(resumed_logs[..], full_logs[3..]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train(&[], &TrainConfig::default(), None, |_, _| {}),
            Err(TrainError::EmptyDataset)
        ));
    }
}
