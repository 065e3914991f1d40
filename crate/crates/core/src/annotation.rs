//! Per-pixel training targets derived from a rendered scene.
//!
//! * `xi_map`: every visible pixel of object `k` carries the object's feature.
//! * `eta_gt`: the pixels of each object nearest its 2D mass center, marked as
//!   seed candidates.
//! * `b_map`: half the feature distance from the pixel's object to the
//!   nearest other object, i.e. the largest sphere around the true feature
//!   that contains no other object's feature.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{feature_distance, ObjectFeature, FEATURE_DIM};
use crate::grid::Grid;
use crate::scenegen::{FrameBundle, Scene};

pub const MIN_CANDIDATE_FRACTION: f64 = 0.10;
pub const MAX_CANDIDATE_FRACTION: f64 = 0.30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("candidate fraction {0} outside [0.10, 0.30]")]
    InvalidFraction(f64),
    #[error("single-object radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("instance map holds label {label} but the scene has {objects} objects")]
    LabelOutOfRange { label: u32, objects: usize },
    #[error("frame is {frame_h}x{frame_w} but the scene camera is {cam_h}x{cam_w}")]
    FrameMismatch {
        frame_h: usize,
        frame_w: usize,
        cam_h: usize,
        cam_w: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    /// Share of each object's visible pixels marked as seed candidates.
    pub fraction: f64,
    /// Enclosing radius used when a scene has a single object.
    pub single_object_radius: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            fraction: 0.20,
            single_object_radius: 1.0,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        check_fraction(self.fraction)?;
        if !(self.single_object_radius > 0.0 && self.single_object_radius.is_finite()) {
            return Err(AnnotationError::InvalidRadius(self.single_object_radius));
        }
        Ok(())
    }
}

fn check_fraction(fraction: f64) -> Result<(), AnnotationError> {
    if (MIN_CANDIDATE_FRACTION..=MAX_CANDIDATE_FRACTION).contains(&fraction) {
        Ok(())
    } else {
        Err(AnnotationError::InvalidFraction(fraction))
    }
}

/// Ground-truth maps for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// `H×W×9`.
    pub xi_map: Grid<f64>,
    /// `H×W`, 1 on seed candidates.
    pub eta_gt: Grid<u8>,
    /// `H×W` enclosing radius, 0 on background.
    pub b_map: Grid<f64>,
    /// `H×W`, 1 on visible object pixels.
    pub fg_mask: Grid<u8>,
    /// Feature of object `k` at index `k - 1`.
    pub per_object_xi: Vec<ObjectFeature>,
    /// Modal labels the maps were built from.
    pub instance_map: Grid<u32>,
}

impl Annotation {
    pub fn height(&self) -> usize {
        self.fg_mask.height()
    }

    pub fn width(&self) -> usize {
        self.fg_mask.width()
    }

    pub fn is_foreground(&self, idx: usize) -> bool {
        self.fg_mask.value(idx) != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.fg_mask.as_slice().iter().filter(|&&m| m != 0).count()
    }

    /// Smallest enclosing radius over foreground pixels, `None` without foreground.
    pub fn min_radius(&self) -> Option<f64> {
        self.b_map
            .as_slice()
            .iter()
            .zip(self.fg_mask.as_slice())
            .filter(|(_, &m)| m != 0)
            .map(|(&b, _)| b)
            .reduce(f64::min)
    }
}

fn check_labels(instance_map: &Grid<u32>, objects: usize) -> Result<(), AnnotationError> {
    match instance_map.as_slice().iter().copied().max() {
        Some(label) if label as usize > objects => {
            Err(AnnotationError::LabelOutOfRange { label, objects })
        }
        _ => Ok(()),
    }
}

/// Broadcasts per-object features onto their visible pixels.
pub fn make_xi_map(
    scene: &Scene,
    frame: &FrameBundle,
) -> Result<(Grid<f64>, Vec<ObjectFeature>), AnnotationError> {
    let features: Vec<ObjectFeature> = scene.objects.iter().map(|o| o.feature()).collect();
    let xi_map = broadcast_features(&features, &frame.instance_map)?;
    Ok((xi_map, features))
}

fn broadcast_features(
    features: &[ObjectFeature],
    instance_map: &Grid<u32>,
) -> Result<Grid<f64>, AnnotationError> {
    check_labels(instance_map, features.len())?;
    let mut xi_map = Grid::zeros(instance_map.height(), instance_map.width(), FEATURE_DIM);
    for (idx, &label) in instance_map.as_slice().iter().enumerate() {
        if label > 0 {
            xi_map
                .at_mut(idx)
                .copy_from_slice(&features[label as usize - 1].0);
        }
    }
    Ok(xi_map)
}

/// Marks, per object, the `max(1, round(fraction · N_k))` visible pixels
/// closest to the object's mean pixel coordinate. Ties go to the smaller
/// `(row, col)`.
pub fn make_centroid_candidates(
    instance_map: &Grid<u32>,
    fraction: f64,
) -> Result<Grid<u8>, AnnotationError> {
    check_fraction(fraction)?;
    let w = instance_map.width();
    let max_label = instance_map.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (idx, &label) in instance_map.as_slice().iter().enumerate() {
        if label > 0 {
            members[label as usize].push(idx);
        }
    }

    let mut eta = Grid::zeros(instance_map.height(), w, 1);
    for pixels in members.iter().filter(|m| !m.is_empty()) {
        let n = pixels.len() as f64;
        let (sr, sc) = pixels.iter().fold((0.0, 0.0), |(r, c), &i| {
            (r + (i / w) as f64, c + (i % w) as f64)
        });
        let (cr, cc) = (sr / n, sc / n);
        let mut ranked: Vec<(f64, usize)> = pixels
            .iter()
            .map(|&i| {
                let (dr, dc) = ((i / w) as f64 - cr, (i % w) as f64 - cc);
                (dr * dr + dc * dc, i)
            })
            .collect();
        // Row-major flat index order equals (row, col) order.
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = ((fraction * n).round() as usize).max(1);
        for &(_, i) in ranked.iter().take(take) {
            eta.as_mut_slice()[i] = 1;
        }
    }
    Ok(eta)
}

/// Half the smallest feature distance from each object to any other object.
///
/// With a single object the minimum is empty and `single_object_radius` is used.
pub fn enclosing_radii(per_object_xi: &[ObjectFeature], single_object_radius: f64) -> Vec<f64> {
    per_object_xi
        .iter()
        .enumerate()
        .map(|(k, a)| {
            per_object_xi
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != k)
                .map(|(_, b)| feature_distance(a, b))
                .reduce(f64::min)
                .map_or(single_object_radius, |d| 0.5 * d)
        })
        .collect()
}

/// Paints each visible pixel with its object's enclosing radius.
pub fn make_bgt_map(
    per_object_xi: &[ObjectFeature],
    instance_map: &Grid<u32>,
    single_object_radius: f64,
) -> Result<Grid<f64>, AnnotationError> {
    check_labels(instance_map, per_object_xi.len())?;
    let radii = enclosing_radii(per_object_xi, single_object_radius);
    Ok(instance_map.map(|l| if l == 0 { 0.0 } else { radii[l as usize - 1] }))
}

/// Builds every target map for a rendered scene.
pub fn annotate(
    scene: &Scene,
    frame: &FrameBundle,
    cfg: &AnnotationConfig,
) -> Result<Annotation, AnnotationError> {
    cfg.validate()?;
    if frame.height() != scene.camera.height || frame.width() != scene.camera.width {
        return Err(AnnotationError::FrameMismatch {
            frame_h: frame.height(),
            frame_w: frame.width(),
            cam_h: scene.camera.height,
            cam_w: scene.camera.width,
        });
    }
    let (xi_map, per_object_xi) = make_xi_map(scene, frame)?;
    annotate_with_features(&frame.instance_map, xi_map, per_object_xi, cfg)
}

/// Same as [`annotate`] for callers that already hold the object features.
pub fn annotate_from_features(
    instance_map: &Grid<u32>,
    per_object_xi: Vec<ObjectFeature>,
    cfg: &AnnotationConfig,
) -> Result<Annotation, AnnotationError> {
    cfg.validate()?;
    let xi_map = broadcast_features(&per_object_xi, instance_map)?;
    annotate_with_features(instance_map, xi_map, per_object_xi, cfg)
}

fn annotate_with_features(
    instance_map: &Grid<u32>,
    xi_map: Grid<f64>,
    per_object_xi: Vec<ObjectFeature>,
    cfg: &AnnotationConfig,
) -> Result<Annotation, AnnotationError> {
    let eta_gt = make_centroid_candidates(instance_map, cfg.fraction)?;
    let b_map = make_bgt_map(&per_object_xi, instance_map, cfg.single_object_radius)?;
    let fg_mask = instance_map.map(|l| u8::from(l > 0));
    Ok(Annotation {
        xi_map,
        eta_gt,
        b_map,
        fg_mask,
        per_object_xi,
        instance_map: instance_map.clone(),
    })
}
