//! On-disk layout of generated datasets and segmentation outputs.
//!
//! A dataset directory holds `manifest.json`, one `scene_NNNN.json` and one
//! `frame_NNNN.tsb` (frame and annotation tensors) per frame. A segmentation
//! directory holds `manifest.json` and one `seg_NNNN.tsb` per frame.

use std::path::{Path, PathBuf};

use clusterseg_core::annotation::{Annotation, AnnotationConfig};
use clusterseg_core::clustering::{Prediction, Segmentation};
use clusterseg_core::dataio::{
    annotation_from_bundle, annotation_to_bundle, frame_from_bundle, frame_to_bundle,
    prediction_to_bundle, read_bundle, segmentation_from_bundle, segmentation_to_bundle,
    write_bundle, Bundle,
};
use clusterseg_core::scenegen::{FrameBundle, GeneratorConfig};
use clusterseg_core::training::Sample;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "clusterseg-dataset";
pub const SEGMENTATION_FORMAT: &str = "clusterseg-segmentations";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub scene: String,
    pub bundle: String,
    pub objects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub annotation: AnnotationConfig,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEntry {
    pub index: usize,
    pub bundle: String,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegManifest {
    pub format: String,
    pub version: u32,
    /// Human-readable description of the producing predictor.
    pub predictor: String,
    pub frames: Vec<SegEntry>,
}

pub fn frame_file(i: usize) -> String {
    format!("frame_{i:04}.tsb")
}

pub fn scene_file(i: usize) -> String {
    format!("scene_{i:04}.json")
}

pub fn seg_file(i: usize) -> String {
    format!("seg_{i:04}.tsb")
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::bad_file(path, e))
}

fn check_format(path: &Path, format: &str, version: u32, want: &str) -> Result<(), CliError> {
    if format != want || version != FORMAT_VERSION {
        return Err(CliError::bad_file(
            path,
            format!("expected {want} v{FORMAT_VERSION}, found {format} v{version}"),
        ));
    }
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest, CliError> {
    let path = dir.join(MANIFEST);
    let m: DatasetManifest = read_json(&path)?;
    check_format(&path, &m.format, m.version, DATASET_FORMAT)?;
    Ok(m)
}

pub fn read_seg_manifest(dir: &Path) -> Result<SegManifest, CliError> {
    let path = dir.join(MANIFEST);
    let m: SegManifest = read_json(&path)?;
    check_format(&path, &m.format, m.version, SEGMENTATION_FORMAT)?;
    Ok(m)
}

fn bundle_path(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = Path::new(name);
    if p.components().count() != 1 || p.is_absolute() {
        return Err(CliError::Data(format!(
            "manifest entry {name:?} is not a plain file name"
        )));
    }
    Ok(dir.join(p))
}

fn load_bundle(path: &Path) -> Result<Bundle, CliError> {
    read_bundle(path).map_err(|e| CliError::bad_file(path, e))
}

pub fn write_frame(
    dir: &Path,
    i: usize,
    frame: &FrameBundle,
    ann: &Annotation,
) -> Result<(), CliError> {
    let mut b = frame_to_bundle(frame)?;
    b.extend(annotation_to_bundle(ann)?);
    let path = dir.join(frame_file(i));
    write_bundle(&path, b.iter().map(|(k, v)| (k.as_str(), v)))
        .map_err(|e| CliError::bad_file(&path, e))
}

pub fn write_segmentation(
    dir: &Path,
    i: usize,
    seg: &Segmentation,
    pred: &Prediction,
) -> Result<(), CliError> {
    let mut b = segmentation_to_bundle(seg)?;
    b.extend(prediction_to_bundle(pred));
    let path = dir.join(seg_file(i));
    write_bundle(&path, b.iter().map(|(k, v)| (k.as_str(), v)))
        .map_err(|e| CliError::bad_file(&path, e))
}

/// Every frame of a dataset with its annotation, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>), CliError> {
    let manifest = read_dataset_manifest(dir)?;
    let samples = manifest
        .frames
        .par_iter()
        .map(|entry| {
            let path = bundle_path(dir, &entry.bundle)?;
            let b = load_bundle(&path)?;
            let frame = frame_from_bundle(&b).map_err(|e| CliError::bad_file(&path, e))?;
            let ann = annotation_from_bundle(&b).map_err(|e| CliError::bad_file(&path, e))?;
            Ok(Sample { frame, ann })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((manifest, samples))
}

/// Every segmentation of an output directory, in manifest order.
pub fn load_segmentations(dir: &Path) -> Result<(SegManifest, Vec<Segmentation>), CliError> {
    let manifest = read_seg_manifest(dir)?;
    let segs = manifest
        .frames
        .par_iter()
        .map(|entry| {
            let path = bundle_path(dir, &entry.bundle)?;
            segmentation_from_bundle(&load_bundle(&path)?).map_err(|e| CliError::bad_file(&path, e))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((manifest, segs))
}
