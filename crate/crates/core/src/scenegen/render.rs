use nalgebra::Vector3;

use super::{Scene, SceneError};
use crate::geometry::{depth_to_xyz, CameraIntrinsics};
use crate::grid::Grid;

/// Depth differences below this resolve to the lower instance id.
pub const DEPTH_TIE_EPS: f64 = 1e-9;

const AMBIENT: f64 = 0.15;
const BACKGROUND_GRAY: f64 = 0.3;

/// Everything rendered for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub camera: CameraIntrinsics,
    /// `H×W×3`, values in `[0, 1]`.
    pub rgb: Grid<f64>,
    /// `H×W`, meters along the optical axis; 0 where nothing is hit.
    pub depth: Grid<f64>,
    /// `H×W×3` back-projection of `depth`.
    pub xyz: Grid<f64>,
    /// `H×W` modal labels, 0 = background, `k` = object `k` (1-based).
    pub instance_map: Grid<u32>,
    /// One `H×W` 0/1 mask per object: pixels the object covers when rendered alone.
    pub amodal_masks: Vec<Grid<u8>>,
    /// `|modal_k| / |amodal_k|` per object.
    pub occlusion_scores: Vec<f64>,
}

impl FrameBundle {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn num_objects(&self) -> usize {
        self.amodal_masks.len()
    }

    /// Visible-pixel mask of object `k` (1-based).
    pub fn modal_mask(&self, k: u32) -> Grid<u8> {
        self.instance_map.map(|l| u8::from(l == k))
    }

    /// Visible pixel count per object, index `k - 1`.
    pub fn modal_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_objects()];
        for &l in self.instance_map.as_slice() {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Fraction of an object's unoccluded footprint that remains visible.
///
/// Returns 0 for an empty amodal mask.
pub fn occlusion_score(modal: &Grid<u8>, amodal: &Grid<u8>) -> Result<f64, SceneError> {
    if modal.shape() != amodal.shape() {
        return Err(SceneError::MaskShapeMismatch);
    }
    let mut n_modal = 0usize;
    let mut n_amodal = 0usize;
    for (&m, &a) in modal.as_slice().iter().zip(amodal.as_slice()) {
        if m != 0 && a == 0 {
            return Err(SceneError::ModalNotSubset);
        }
        n_modal += usize::from(m != 0);
        n_amodal += usize::from(a != 0);
    }
    if n_amodal == 0 {
        return Ok(0.0);
    }
    Ok(n_modal as f64 / n_amodal as f64)
}

/// Ray casts every pixel against every object.
///
/// The nearest positive hit wins; hits within [`DEPTH_TIE_EPS`] of the nearest
/// go to the lowest instance id. Color is the winner's albedo under a
/// Lambertian headlight at the camera center.
pub fn render(scene: &Scene) -> FrameBundle {
    let cam = scene.camera;
    let (h, w) = (cam.height, cam.width);
    let k = scene.objects.len();

    let mut rgb = Grid::zeros(h, w, 3);
    let mut depth = Grid::zeros(h, w, 1);
    let mut instance_map = Grid::<u32>::zeros(h, w, 1);
    let mut amodal_masks = vec![Grid::<u8>::zeros(h, w, 1); k];
    let mut hits = Vec::with_capacity(k);

    for v in 0..h {
        for u in 0..w {
            let dir = Vector3::from(cam.ray(u, v));
            hits.clear();
            hits.extend(scene.objects.iter().map(|o| o.intersect(&dir)));

            let mut nearest = f64::INFINITY;
            for (obj, hit) in hits.iter().enumerate() {
                if let Some(hit) = hit {
                    amodal_masks[obj].set(v, u, 0, 1);
                    nearest = nearest.min(hit.t);
                }
            }
            if nearest.is_finite() {
                let (obj, hit) = hits
                    .iter()
                    .enumerate()
                    .find_map(|(i, h)| h.filter(|h| h.t <= nearest + DEPTH_TIE_EPS).map(|h| (i, h)))
                    .expect("a hit exists");
                depth.set(v, u, 0, nearest);
                instance_map.set(v, u, 0, obj as u32 + 1);
                let view = -dir.normalize();
                let shade = hit.normal.dot(&view).max(0.0);
                let albedo = scene.objects[obj].albedo;
                for c in 0..3 {
                    rgb.set(v, u, c, albedo[c] * (AMBIENT + (1.0 - AMBIENT) * shade));
                }
            } else if let Some(bg) = scene.background_depth {
                depth.set(v, u, 0, bg);
                for c in 0..3 {
                    rgb.set(v, u, c, BACKGROUND_GRAY);
                }
            }
        }
    }

    let xyz = depth_to_xyz(&depth, &cam).expect("depth map matches the camera");
    let mut frame = FrameBundle {
        camera: cam,
        rgb,
        depth,
        xyz,
        instance_map,
        amodal_masks,
        occlusion_scores: Vec::new(),
    };
    frame.occlusion_scores = (1..=k as u32)
        .map(|id| {
            occlusion_score(&frame.modal_mask(id), &frame.amodal_masks[id as usize - 1])
                .expect("modal pixels are a subset of amodal pixels")
        })
        .collect();
    frame
}
