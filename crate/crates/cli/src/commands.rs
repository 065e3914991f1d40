use std::io::Write;
use std::path::Path;

use clusterseg_core::annotation::annotate;
use clusterseg_core::clustering::{segment, Prediction, Segmentation};
use clusterseg_core::eval::{compute_metrics, EvalResult, ImageRecord};
use clusterseg_core::losses::{
    finite_diff_check_against, random_check_case, total_loss, GradCheckConfig, GradCheckReport,
    LossGradients,
};
use clusterseg_core::predictor::{
    mlp_forward, noisy_predict_with, oracle_predict, BoundMode, Checkpoint, MlpModel, NoiseSpec,
};
use clusterseg_core::rng::{stream, streams};
use clusterseg_core::scenegen::{render, sample_scene_with};
use clusterseg_core::training::{logs_to_csv, train, Sample};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{EvalArgs, GenArgs, GradcheckArgs, InferArgs, PredictorKind, TrainArgs};
use crate::config::RunConfig;
use crate::dataset::{
    create_dir, frame_file, load_dataset, load_segmentations, scene_file, seg_file, write_frame,
    write_json, write_segmentation, write_text, DatasetManifest, FrameEntry, SegEntry, SegManifest,
    DATASET_FORMAT, FORMAT_VERSION, MANIFEST, SEGMENTATION_FORMAT,
};
use crate::error::CliError;

pub fn cmd_gen(
    args: &GenArgs,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    if cfg.count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    create_dir(&args.out)?;
    let frames = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, streams::SCENE + i as u64);
            let scene = sample_scene_with(&mut rng, &cfg.generator)?;
            let frame = render(&scene);
            let ann = annotate(&scene, &frame, &cfg.annotation)?;
            write_text(&args.out.join(scene_file(i)), &scene.to_json())?;
            write_frame(&args.out, i, &frame, &ann)?;
            Ok(FrameEntry {
                index: i,
                scene: scene_file(i),
                bundle: frame_file(i),
                objects: scene.num_objects(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        seed: cfg.seed,
        generator: cfg.generator.clone(),
        annotation: cfg.annotation.clone(),
        frames,
    };
    write_json(&args.out.join(MANIFEST), &manifest)?;
    let objects: usize = manifest.frames.iter().map(|f| f.objects).sum();
    writeln!(
        out,
        "wrote {} frames ({objects} objects) to {}",
        cfg.count,
        args.out.display()
    )
    .ok();
    Ok(())
}

fn load_model(path: Option<&Path>) -> Result<MlpModel, CliError> {
    let path =
        path.ok_or_else(|| CliError::Usage("--model is required with --predictor mlp".into()))?;
    Ok(Checkpoint::load(path)
        .map_err(|e| CliError::bad_file(path, e))?
        .model)
}

fn predict(
    kind: PredictorKind,
    model: Option<&MlpModel>,
    noise: &NoiseSpec,
    ball_factor: Option<f64>,
    seed: u64,
    i: usize,
    s: &Sample,
) -> Result<Prediction, CliError> {
    Ok(match kind {
        PredictorKind::Oracle => oracle_predict(&s.ann),
        PredictorKind::Noisy => {
            let mut spec = noise.clone();
            if let Some(f) = ball_factor {
                spec.bound = BoundMode::UniformBall {
                    radius: f * s.ann.min_radius().unwrap_or(0.0),
                };
            }
            noisy_predict_with(&s.ann, &spec, &mut stream(seed, streams::NOISE + i as u64))?
        }
        PredictorKind::Mlp => mlp_forward(model.expect("loaded"), &s.frame)?
            .0
            .to_prediction(),
    })
}

fn metrics(
    samples: &[Sample],
    segs: &[Segmentation],
    cfg: &RunConfig,
) -> Result<EvalResult, CliError> {
    let records = samples
        .par_iter()
        .zip(segs)
        .map(|(s, seg)| ImageRecord::from_frame(seg, &s.frame))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(compute_metrics(&records, &cfg.eval)?)
}

fn describe(kind: PredictorKind, cfg: &RunConfig, model: Option<&Path>) -> String {
    match kind {
        PredictorKind::Oracle => "oracle".into(),
        PredictorKind::Noisy => format!(
            "noisy {}",
            serde_json::json!({"seed": cfg.seed, "noise": cfg.noise, "ball_factor": cfg.ball_factor})
        ),
        PredictorKind::Mlp => format!(
            "mlp {}",
            model.map(|p| p.display().to_string()).unwrap_or_default()
        ),
    }
}

pub fn cmd_infer(
    args: &InferArgs,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    if args.out.is_none() && args.sweep_out.is_none() {
        return Err(CliError::Usage("give --out, --sweep-out or both".into()));
    }
    if !args.sweep_sigma.is_empty() && args.predictor != PredictorKind::Noisy {
        return Err(CliError::Usage(
            "--sweep-sigma needs --predictor noisy".into(),
        ));
    }
    let model = match args.predictor {
        PredictorKind::Mlp => Some(load_model(args.model.as_deref())?),
        _ => None,
    };
    let (_, samples) = load_dataset(&args.dataset)?;

    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let results = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let pred = predict(
                    args.predictor,
                    model.as_ref(),
                    &cfg.noise,
                    cfg.ball_factor,
                    cfg.seed,
                    i,
                    s,
                )?;
                let seg = segment(&pred, cfg.fg_threshold)?;
                write_segmentation(dir, i, &seg, &pred)?;
                Ok(seg)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = SegManifest {
            format: SEGMENTATION_FORMAT.into(),
            version: FORMAT_VERSION,
            predictor: describe(args.predictor, cfg, args.model.as_deref()),
            frames: results
                .iter()
                .enumerate()
                .map(|(i, seg)| SegEntry {
                    index: i,
                    bundle: seg_file(i),
                    instances: seg.num_instances(),
                })
                .collect(),
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        let r = metrics(&samples, &results, cfg)?;
        writeln!(
            out,
            "segmented {} frames into {}",
            results.len(),
            dir.display()
        )
        .ok();
        writeln!(out, "{}", r.to_table()).ok();
    }

    if let Some(path) = &args.sweep_out {
        let mut csv = String::from("sigma_xi,ap,ap50,ap75,ar\n");
        for &sigma in &args.sweep_sigma {
            let spec = NoiseSpec {
                sigma_xi: sigma,
                bound: BoundMode::Gaussian,
                ..cfg.noise.clone()
            };
            spec.validate()?;
            let segs = samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let pred = predict(PredictorKind::Noisy, None, &spec, None, cfg.seed, i, s)?;
                    Ok(segment(&pred, cfg.fg_threshold)?)
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let r = metrics(&samples, &segs, cfg)?;
            csv.push_str(&format!(
                "{sigma},{},{},{},{}\n",
                r.ap, r.ap50, r.ap75, r.ar
            ));
        }
        write_text(path, &csv)?;
        write!(out, "{csv}").ok();
    }
    Ok(())
}

pub fn cmd_eval(
    args: &EvalArgs,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let (_, samples) = load_dataset(&args.dataset)?;
    let (_, segs) = load_segmentations(&args.segs)?;
    if samples.len() != segs.len() {
        return Err(CliError::Data(format!(
            "dataset has {} frames but {} segmentations were found",
            samples.len(),
            segs.len()
        )));
    }
    let r = metrics(&samples, &segs, cfg)?;
    if let Some(path) = &args.report {
        write_text(path, &format!("{}\n", r.to_json()))?;
    }
    writeln!(out, "{}", r.to_table()).ok();
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub per_term: [usize; 5],
    pub frames: Vec<GradCheckReport>,
}

fn scale_gradients(g: &mut LossGradients, factor: f64) {
    for grid in [
        &mut g.xi_hat,
        &mut g.b_hat,
        &mut g.eta_logits,
        &mut g.mask_logits,
    ] {
        grid.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn cmd_gradcheck(
    args: &GradcheckArgs,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let frames = (0..g.frames)
        .into_par_iter()
        .map(|f| {
            let seed = cfg.seed.wrapping_add(f as u64);
            let (ann, pred) = random_check_case(seed, g.size, cfg.loss.lambda_v)?;
            let mut grads = total_loss(&pred, &ann, &cfg.loss)?.grads;
            if let Some(factor) = args.corrupt_scale {
                scale_gradients(&mut grads, factor);
            }
            let check = GradCheckConfig {
                epsilon: g.epsilon,
                samples: g.samples,
                seed,
            };
            Ok(finite_diff_check_against(
                &pred, &ann, &cfg.loss, &check, &grads,
            )?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let max_rel_error = frames.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut per_term = [0; 5];
    for r in &frames {
        per_term
            .iter_mut()
            .zip(r.per_term)
            .for_each(|(a, b)| *a += b);
    }
    let summary = GradcheckSummary {
        passed: max_rel_error < g.tolerance,
        tolerance: g.tolerance,
        max_rel_error,
        checked: frames.iter().map(|r| r.checked).sum(),
        skipped: frames.iter().map(|r| r.skipped).sum(),
        per_term,
        frames,
    };
    for (f, r) in summary.frames.iter().enumerate() {
        writeln!(
            out,
            "frame {f}: max_rel_error={:e} checked={} skipped={}",
            r.max_rel_error, r.checked, r.skipped
        )
        .ok();
    }
    writeln!(
        out,
        "max_rel_error={:e} checked={} per_term[s,cen,p,var,vio]={:?} tolerance={:e} {}",
        summary.max_rel_error,
        summary.checked,
        summary.per_term,
        summary.tolerance,
        if summary.passed { "PASS" } else { "FAIL" }
    )
    .ok();
    if let Some(path) = &args.report {
        write_json(path, &summary)?;
    }
    if summary.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: {:e} >= {:e}",
            summary.max_rel_error, summary.tolerance
        )))
    }
}

pub fn cmd_train(
    args: &TrainArgs,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let resume = args
        .resume
        .as_deref()
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::bad_file(p, e)))
        .transpose()?;
    let (_, samples) = load_dataset(&args.dataset)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let tc = cfg.train_config();
    let (ck, logs) = train(&samples, &tc, resume, |l, _| {
        eprintln!(
            "epoch {:>3}  total {:.6e}  base {:.6e}  ap {:.4}",
            l.epoch, l.total, l.total_base, l.ap
        );
    })?;
    ck.save(&args.out)
        .map_err(|e| CliError::bad_file(&args.out, e))?;
    write_text(&log_path, &logs_to_csv(&logs))?;
    writeln!(
        out,
        "trained to epoch {} on {} frames; checkpoint {}, log {}",
        ck.epochs_done,
        samples.len(),
        args.out.display(),
        log_path.display()
    )
    .ok();
    Ok(())
}

pub fn cmd_config(
    path: Option<&Path>,
    cfg: &RunConfig,
    out: &mut (dyn Write + Send),
) -> Result<(), CliError> {
    let text = format!("{}\n", cfg.to_json());
    match path {
        Some(p) => write_text(p, &text),
        None => {
            write!(out, "{text}").ok();
            Ok(())
        }
    }
}
