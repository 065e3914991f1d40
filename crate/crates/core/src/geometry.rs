//! Pinhole camera, depth back-projection and the 9-D object feature.
//!
//! The object feature of a point set is
//!
//! ```text
//! ξ = (cx, cy, cz, cx + xx, cy + yy, cz + zz, cx + xy, cy + yz, cz + zx)
//! ```
//!
//! where `(cx, cy, cz)` is the midpoint of the axis-aligned bounds and `xx … zx`
//! are population second moments of the points about that midpoint. Every
//! pixel showing an object carries that object's feature, which turns instance
//! segmentation into clustering in feature space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

/// Dimension of the object feature.
pub const FEATURE_DIM: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth map is {got_h}x{got_w} but intrinsics expect {want_h}x{want_w}")]
    DimensionMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("cannot compute an object feature from an empty point cloud")]
    EmptyPointCloud,
    #[error("point cloud contains a non-finite coordinate")]
    NonFinitePoint,
}

/// Pinhole intrinsics without distortion. Pixel `(u, v)` is column `u`, row `v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ppx: f64,
    pub ppy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        ppx: f64,
        ppy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            ppx,
            ppy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels, principal point at the image center, given horizontal focal length.
    pub fn centered(width: usize, height: usize, focal: f64) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.ppx.is_finite() && self.ppy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Direction of the ray through pixel `(u, v)`, scaled so that its z component is 1.
    #[inline]
    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        [
            (u as f64 - self.ppx) / self.fx,
            (v as f64 - self.ppy) / self.fy,
            1.0,
        ]
    }

    /// Back-projects pixel `(u, v)` at depth `d` (z coordinate, meters).
    #[inline]
    pub fn unproject(&self, u: usize, v: usize, d: f64) -> [f64; 3] {
        [
            (u as f64 - self.ppx) * d / self.fx,
            (v as f64 - self.ppy) * d / self.fy,
            d,
        ]
    }
}

/// Converts an `H×W` depth map (meters, 0 = invalid) to an `H×W×3` XYZ map.
///
/// Invalid pixels map to the origin.
pub fn depth_to_xyz(
    depth: &Grid<f64>,
    intr: &CameraIntrinsics,
) -> Result<Grid<f64>, GeometryError> {
    if depth.height() != intr.height || depth.width() != intr.width || depth.channels() != 1 {
        return Err(GeometryError::DimensionMismatch {
            got_h: depth.height(),
            got_w: depth.width(),
            want_h: intr.height,
            want_w: intr.width,
        });
    }
    let mut xyz = Grid::zeros(depth.height(), depth.width(), 3);
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let d = depth.get(v, u, 0);
            if d > 0.0 && d.is_finite() {
                xyz.pixel_mut(v, u)
                    .copy_from_slice(&intr.unproject(u, v, d));
            }
        }
    }
    Ok(xyz)
}

/// A point set in the camera frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(mut lo, mut hi), p| {
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                    (lo, hi)
                }),
        )
    }
}

/// The 9-D per-object feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeature(pub [f64; FEATURE_DIM]);

impl ObjectFeature {
    pub const ZERO: ObjectFeature = ObjectFeature([0.0; FEATURE_DIM]);

    /// Bounding-box center `(cx, cy, cz)`.
    pub fn center(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    /// Second moments `(xx, yy, zz, xy, yz, zx)` recovered by subtracting the
    /// center from the last six components.
    pub fn moments(&self) -> [f64; 6] {
        let c = self.center();
        [
            self.0[3] - c[0],
            self.0[4] - c[1],
            self.0[5] - c[2],
            self.0[6] - c[0],
            self.0[7] - c[1],
            self.0[8] - c[2],
        ]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Computes the object feature of a point cloud.
pub fn compute_object_feature(pc: &PointCloud) -> Result<ObjectFeature, GeometryError> {
    if pc.points.iter().flatten().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinitePoint);
    }
    let (lo, hi) = pc.bounds().ok_or(GeometryError::EmptyPointCloud)?;
    let c = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    // xx, yy, zz, xy, yz, zx
    let mut m = [0.0f64; 6];
    for p in &pc.points {
        let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        m[0] += dx * dx;
        m[1] += dy * dy;
        m[2] += dz * dz;
        m[3] += dx * dy;
        m[4] += dy * dz;
        m[5] += dz * dx;
    }
    let n = pc.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(ObjectFeature([
        c[0],
        c[1],
        c[2],
        c[0] + m[0],
        c[1] + m[1],
        c[2] + m[2],
        c[0] + m[3],
        c[1] + m[4],
        c[2] + m[5],
    ]))
}

/// Euclidean distance between two 9-vectors.
#[inline]
pub fn feature_distance(a: &ObjectFeature, b: &ObjectFeature) -> f64 {
    slice_distance(&a.0, &b.0)
}

#[inline]
pub(crate) fn slice_distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn slice_distance(a: &[f64], b: &[f64]) -> f64 {
    slice_distance_sq(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr(fx: f64, ppx: f64, w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, ppx, ppx, w, h).unwrap()
    }

    #[test]
    fn principal_point_projects_onto_axis() {
        let k = intr(100.0, 50.0, 101, 101);
        let mut depth = Grid::zeros(101, 101, 1);
        depth.set(50, 50, 0, 2.0);
        let xyz = depth_to_xyz(&depth, &k).unwrap();
        assert_eq!(xyz.pixel(50, 50), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn pinhole_offset_pixel() {
        let k = intr(100.0, 50.0, 200, 100);
        let mut depth = Grid::zeros(100, 200, 1);
        depth.set(50, 150, 0, 1.0);
        let xyz = depth_to_xyz(&depth, &k).unwrap();
        assert_eq!(xyz.pixel(50, 150), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_depth_maps_to_origin() {
        let k = intr(100.0, 2.0, 4, 4);
        let xyz = depth_to_xyz(&Grid::zeros(4, 4, 1), &k).unwrap();
        assert!(xyz.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_dimension_mismatch_is_reported() {
        let k = intr(100.0, 2.0, 4, 4);
        let err = depth_to_xyz(&Grid::zeros(3, 4, 1), &k).unwrap_err();
        assert!(matches!(
            err,
            GeometryError::DimensionMismatch { got_h: 3, .. }
        ));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
    }

    #[test]
    fn single_point_feature() {
        let f = compute_object_feature(&PointCloud::new(vec![[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(f.0, [1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unit_cube_corners_feature() {
        let mut pts = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[0.5, 1.5] {
                    pts.push([x, y, z]);
                }
            }
        }
        let f = compute_object_feature(&PointCloud::new(pts)).unwrap();
        assert_eq!(f.0, [0.0, 0.0, 1.0, 0.25, 0.25, 1.25, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_point_feature() {
        let f = compute_object_feature(&PointCloud::new(vec![[0.0; 3], [2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(f.0, [1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert_eq!(
            compute_object_feature(&PointCloud::default()),
            Err(GeometryError::EmptyPointCloud)
        );
    }

    #[test]
    fn distances() {
        let z = ObjectFeature::ZERO;
        assert_eq!(feature_distance(&z, &z), 0.0);
        let mut e = [0.0; 9];
        e[0] = 2.0;
        assert_eq!(feature_distance(&z, &ObjectFeature(e)), 2.0);
        assert_eq!(feature_distance(&ObjectFeature([1.0; 9]), &z), 3.0);
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..40)
    }

    proptest! {
        #[test]
        fn depth_channel_round_trips(d in prop::collection::vec(prop_oneof![Just(0.0), 0.05f64..10.0], 12)) {
            let k = CameraIntrinsics::new(50.0, 60.0, 1.5, 2.0, 4, 3).unwrap();
            let depth = Grid::from_vec(3, 4, 1, d).unwrap();
            let xyz = depth_to_xyz(&depth, &k).unwrap();
            for i in 0..12 {
                prop_assert_eq!(xyz.at(i)[2], depth.value(i));
            }
        }

        #[test]
        fn feature_translation_covariance(pts in cloud(), t in prop::array::uniform3(-3.0f64..3.0)) {
            let f = compute_object_feature(&PointCloud::new(pts.clone())).unwrap();
            let moved: Vec<_> = pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
            let g = compute_object_feature(&PointCloud::new(moved)).unwrap();
            for a in 0..3 {
                prop_assert!((g.0[a] - f.0[a] - t[a]).abs() < 1e-9);
            }
            for (mf, mg) in f.moments().iter().zip(g.moments()) {
                prop_assert!((mf - mg).abs() < 1e-8);
            }
        }

        #[test]
        fn feature_permutation_invariant(pts in cloud(), rot in 0usize..40) {
            let f = compute_object_feature(&PointCloud::new(pts.clone())).unwrap();
            let mut shuffled = pts.clone();
            shuffled.rotate_left(rot % pts.len());
            shuffled.reverse();
            let g = compute_object_feature(&PointCloud::new(shuffled)).unwrap();
            for (a, b) in f.0.iter().zip(g.0) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn diagonal_moments_non_negative(pts in cloud()) {
            let f = compute_object_feature(&PointCloud::new(pts)).unwrap();
            let m = f.moments();
            prop_assert!(m[0] >= 0.0 && m[1] >= 0.0 && m[2] >= 0.0);
            prop_assert!(f.0.iter().all(|v| v.is_finite()));
        }
    }
}
