//! Synthetic RGB-D scenes built from analytic spheres and boxes.
//!
//! A [`Scene`] is authored directly in the camera frame. [`sample_scene`] draws
//! random scenes from a [`GeneratorConfig`]; [`render`] ray casts them into a
//! [`FrameBundle`] with modal and amodal instance masks.
//!
//! Scenes serialize to JSON:
//!
//! ```json
//! {
//!   "camera": {"fx": 64.0, "fy": 64.0, "ppx": 32.0, "ppy": 32.0, "width": 64, "height": 64},
//!   "background_depth": null,
//!   "objects": [
//!     {"kind": "sphere", "quaternion_wxyz": [1, 0, 0, 0], "translation": [0, 0, 1],
//!      "half_extents": [0.1, 0.1, 0.1], "albedo": [0.8, 0.2, 0.2]}
//!   ]
//! }
//! ```
//!
//! Instance ids are 1-based positions in `objects`.

mod raycast;
mod render;

pub use raycast::Hit;
pub use render::{occlusion_score, render, FrameBundle};

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compute_object_feature, feature_distance, CameraIntrinsics, ObjectFeature, PointCloud,
};
use crate::rng;

/// Number of deterministic surface samples used to compute a primitive's feature.
pub const SURFACE_SAMPLES: usize = 4096;

/// Largest number of objects whose ids fit a `u16` label map with 0 reserved.
pub const MAX_OBJECTS: usize = 65534;

/// Objects must keep their nearest point at least this far in front of the camera.
pub const MIN_OBJECT_DEPTH: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("could not place object {object} within {attempts} attempts")]
    PlacementFailed { object: usize, attempts: usize },
    #[error("modal mask is not contained in the amodal mask")]
    ModalNotSubset,
    #[error("mask shapes differ")]
    MaskShapeMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

/// One analytic object. Spheres store their radius in all three half extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub quaternion_wxyz: [f64; 4],
    pub translation: [f64; 3],
    pub half_extents: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            kind: PrimitiveKind::Sphere,
            quaternion_wxyz: [1.0, 0.0, 0.0, 0.0],
            translation: center,
            half_extents: [radius; 3],
            albedo,
        }
    }

    pub fn cuboid(
        center: [f64; 3],
        quaternion_wxyz: [f64; 4],
        half_extents: [f64; 3],
        albedo: [f64; 3],
    ) -> Self {
        Self {
            kind: PrimitiveKind::Box,
            quaternion_wxyz,
            translation: center,
            half_extents,
            albedo,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.quaternion_wxyz;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera-frame axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let ext: [f64; 3] = match self.kind {
            PrimitiveKind::Sphere => [self.half_extents[0]; 3],
            PrimitiveKind::Box => {
                let r = self.rotation().to_rotation_matrix();
                let m = r.matrix();
                let mut e = [0.0; 3];
                for (i, ei) in e.iter_mut().enumerate() {
                    *ei = (0..3).map(|j| m[(i, j)].abs() * self.half_extents[j]).sum();
                }
                e
            }
        };
        let t = self.translation;
        (
            [t[0] - ext[0], t[1] - ext[1], t[2] - ext[2]],
            [t[0] + ext[0], t[1] + ext[1], t[2] + ext[2]],
        )
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let all_finite = self
            .quaternion_wxyz
            .iter()
            .chain(&self.translation)
            .chain(&self.half_extents)
            .chain(&self.albedo)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(SceneError::InvalidScene(
                "non-finite primitive parameter".into(),
            ));
        }
        if self.half_extents.iter().any(|&h| h <= 0.0) {
            return Err(SceneError::InvalidScene(format!(
                "half extents must be positive, got {:?}",
                self.half_extents
            )));
        }
        if self.kind == PrimitiveKind::Sphere
            && (self.half_extents[1] != self.half_extents[0]
                || self.half_extents[2] != self.half_extents[0])
        {
            return Err(SceneError::InvalidScene(
                "sphere half extents must all equal the radius".into(),
            ));
        }
        let norm = self
            .quaternion_wxyz
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidScene(format!(
                "quaternion not normalized (norm {norm})"
            )));
        }
        if self.albedo.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(SceneError::InvalidScene(format!(
                "albedo outside [0,1]: {:?}",
                self.albedo
            )));
        }
        Ok(())
    }

    /// `n` deterministic points on the primitive surface, in the camera frame.
    pub fn surface_points(&self, n: usize) -> PointCloud {
        let local = match self.kind {
            PrimitiveKind::Sphere => fibonacci_sphere(n),
            PrimitiveKind::Box => box_surface(n, self.half_extents),
        };
        let rot = self.rotation();
        let t = self.translation_vec();
        let points = local
            .into_iter()
            .map(|p| {
                let p = match self.kind {
                    PrimitiveKind::Sphere => Vector3::new(
                        p[0] * self.half_extents[0],
                        p[1] * self.half_extents[1],
                        p[2] * self.half_extents[2],
                    ),
                    PrimitiveKind::Box => Vector3::from(p),
                };
                let q = rot * p + t;
                [q.x, q.y, q.z]
            })
            .collect();
        PointCloud::new(points)
    }

    /// Object feature of the full surface sample.
    pub fn feature(&self) -> ObjectFeature {
        compute_object_feature(&self.surface_points(SURFACE_SAMPLES))
            .expect("surface sample is non-empty and finite")
    }
}

/// Unit-sphere Fibonacci lattice.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Points spread over the six faces of a box with the given half extents,
/// allotted in proportion to face area (largest remainder, at least one per face).
fn box_surface(n: usize, h: [f64; 3]) -> Vec<[f64; 3]> {
    // Face pairs ordered by normal axis; each face of the pair gets the same share.
    let areas = [
        h[1] * h[2],
        h[1] * h[2],
        h[0] * h[2],
        h[0] * h[2],
        h[0] * h[1],
        h[0] * h[1],
    ];
    let total: f64 = areas.iter().sum();
    let mut counts = [0usize; 6];
    let mut rema = [(0.0f64, 0usize); 6];
    for f in 0..6 {
        let exact = n as f64 * areas[f] / total;
        counts[f] = exact.floor() as usize;
        rema[f] = (exact - counts[f] as f64, f);
    }
    let assigned: usize = counts.iter().sum();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, f) in rema.iter().take(n.saturating_sub(assigned)) {
        counts[f] += 1;
    }
    if n >= 6 {
        for f in 0..6 {
            if counts[f] == 0 {
                let donor = (0..6)
                    .max_by_key(|&g| (counts[g], std::cmp::Reverse(g)))
                    .unwrap();
                counts[donor] -= 1;
                counts[f] = 1;
            }
        }
    }

    let mut pts = Vec::with_capacity(n);
    for (f, &count) in counts.iter().enumerate() {
        let axis = f / 2;
        let sign = if f % 2 == 0 { -1.0 } else { 1.0 };
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        for i in 0..count {
            let s = 2.0 * radical_inverse(i + 1, 2) - 1.0;
            let t = 2.0 * radical_inverse(i + 1, 3) - 1.0;
            let mut p = [0.0; 3];
            p[axis] = sign * h[axis];
            p[a1] = s * h[a1];
            p[a2] = t * h[a2];
            pts.push(p);
        }
    }
    pts
}

/// A set of primitives viewed by one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub camera: CameraIntrinsics,
    /// Depth of a fronto-parallel background plane, or `None` for empty space.
    pub background_depth: Option<f64>,
    pub objects: Vec<Primitive>,
}

impl Scene {
    pub fn new(camera: CameraIntrinsics, objects: Vec<Primitive>) -> Self {
        Self {
            camera,
            background_depth: None,
            objects,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.camera
            .validate()
            .map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        if self.objects.len() > MAX_OBJECTS {
            return Err(SceneError::InvalidScene(format!(
                "{} objects exceed the limit of {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            obj.validate()?;
            let (lo, hi) = obj.bounds();
            if lo[2] <= MIN_OBJECT_DEPTH {
                return Err(SceneError::InvalidScene(format!(
                    "object {} reaches z={:.4}, closer than {MIN_OBJECT_DEPTH} m",
                    i + 1,
                    lo[2]
                )));
            }
            if let Some(bg) = self.background_depth {
                if hi[2] >= bg {
                    return Err(SceneError::InvalidScene(format!(
                        "object {} extends behind the background plane",
                        i + 1
                    )));
                }
            }
        }
        if let Some(bg) = self.background_depth {
            if !(bg > 0.0 && bg.is_finite()) {
                return Err(SceneError::InvalidScene(
                    "background depth must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let scene: Scene =
            serde_json::from_str(s).map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Axis-aligned region (camera frame, meters) from which object centers are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementVolume {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (square pixels, centered principal point).
    pub focal: f64,
    /// Inclusive range for the number of objects.
    pub objects: [usize; 2],
    /// Range of half extents (and sphere radii), meters.
    pub size_range: [f64; 2],
    pub placement: PlacementVolume,
    pub sphere_probability: f64,
    /// Minimum feature distance between any two objects of a scene.
    pub min_feature_separation: f64,
    /// Attempts per object before giving up.
    pub max_attempts: usize,
    pub background_depth: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 64.0,
            objects: [2, 6],
            size_range: [0.05, 0.15],
            placement: PlacementVolume {
                x: [-0.3, 0.3],
                y: [-0.3, 0.3],
                z: [0.9, 1.6],
            },
            sphere_probability: 0.5,
            min_feature_separation: 0.05,
            max_attempts: 1000,
            background_depth: None,
        }
    }
}

impl GeneratorConfig {
    pub fn camera(&self) -> Result<CameraIntrinsics, SceneError> {
        CameraIntrinsics::centered(self.width, self.height, self.focal)
            .map_err(|e| SceneError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        self.camera()?;
        let [lo, hi] = self.objects;
        if lo > hi || hi > MAX_OBJECTS {
            return bad(format!("object range {lo}..{hi} is invalid"));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.size_range) || self.size_range[0] <= 0.0 {
            return bad(format!("size range {:?} is invalid", self.size_range));
        }
        let p = &self.placement;
        if !(ordered(p.x) && ordered(p.y) && ordered(p.z)) {
            return bad("placement volume bounds are not ordered".into());
        }
        if !(0.0..=1.0).contains(&self.sphere_probability) {
            return bad("sphere probability must lie in [0,1]".into());
        }
        if !(self.min_feature_separation >= 0.0) {
            return bad("min feature separation must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max attempts must be positive".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Uniformly distributed rotation (Shoemake's subgroup algorithm), as wxyz.
fn random_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn random_primitive(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Primitive {
    let sphere = rng.random::<f64>() < cfg.sphere_probability;
    let center = [
        uniform(rng, cfg.placement.x),
        uniform(rng, cfg.placement.y),
        uniform(rng, cfg.placement.z),
    ];
    let albedo = [
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
    ];
    if sphere {
        Primitive::sphere(center, uniform(rng, cfg.size_range), albedo)
    } else {
        let q = random_quaternion(rng);
        let h = [
            uniform(rng, cfg.size_range),
            uniform(rng, cfg.size_range),
            uniform(rng, cfg.size_range),
        ];
        Primitive::cuboid(center, q, h, albedo)
    }
}

/// Draws a scene from `cfg` using the scene stream of `seed`.
pub fn sample_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene, SceneError> {
    sample_scene_with(&mut rng::stream(seed, rng::streams::SCENE), cfg)
}

/// Draws a scene from an explicit generator.
///
/// Objects are rejection sampled until they sit in front of the camera and
/// their feature is at least `min_feature_separation` from every object
/// already placed.
pub fn sample_scene_with(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let camera = cfg.camera()?;
    let count = if cfg.objects[0] == cfg.objects[1] {
        cfg.objects[0]
    } else {
        rng.random_range(cfg.objects[0]..=cfg.objects[1])
    };
    let mut objects: Vec<Primitive> = Vec::with_capacity(count);
    let mut features: Vec<ObjectFeature> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let p = random_primitive(rng, cfg);
            let (lo, hi) = p.bounds();
            if lo[2] <= MIN_OBJECT_DEPTH {
                continue;
            }
            if cfg.background_depth.is_some_and(|bg| hi[2] >= bg) {
                continue;
            }
            let f = p.feature();
            if features
                .iter()
                .any(|g| feature_distance(&f, g) < cfg.min_feature_separation)
            {
                continue;
            }
            objects.push(p);
            features.push(f);
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::PlacementFailed {
                object: k + 1,
                attempts: cfg.max_attempts,
            });
        }
    }
    let scene = Scene {
        camera,
        background_depth: cfg.background_depth,
        objects,
    };
    scene.validate()?;
    Ok(scene)
}
