//! Analytic ray intersection against the two primitive kinds.
//!
//! Rays start at the camera origin. Hit parameters are expressed for a
//! direction whose z component is 1, so the parameter equals the depth.

use nalgebra::Vector3;

use super::{Primitive, PrimitiveKind};

/// Closest intersection in front of the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals the z coordinate of the hit point for z-normalized rays.
    pub t: f64,
    /// Outward unit surface normal in the camera frame.
    pub normal: Vector3<f64>,
}

impl Primitive {
    /// Intersects the ray `t · dir`, `t > 0`, with the primitive surface.
    pub fn intersect(&self, dir: &Vector3<f64>) -> Option<Hit> {
        match self.kind {
            PrimitiveKind::Sphere => self.intersect_sphere(dir),
            PrimitiveKind::Box => self.intersect_box(dir),
        }
    }

    fn intersect_sphere(&self, dir: &Vector3<f64>) -> Option<Hit> {
        let c = self.translation_vec();
        let r = self.half_extents[0];
        let a = dir.norm_squared();
        let half_b = dir.dot(&c);
        let cc = c.norm_squared() - r * r;
        let disc = half_b * half_b - a * cc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let near = (half_b - sq) / a;
        let far = (half_b + sq) / a;
        let t = if near > 0.0 {
            near
        } else if far > 0.0 {
            far
        } else {
            return None;
        };
        let normal = (dir * t - c) / r;
        Some(Hit {
            t,
            normal: normal.normalize(),
        })
    }

    fn intersect_box(&self, dir: &Vector3<f64>) -> Option<Hit> {
        let rot = self.rotation();
        let inv = rot.inverse();
        let origin = inv * (-self.translation_vec());
        let d = inv * dir;
        let h = self.half_extents;

        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut near_axis = 0usize;
        let mut near_sign = 0.0f64;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if origin[a].abs() > h[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-h[a] - origin[a]) / d[a];
            let t2 = (h[a] - origin[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                near_axis = a;
                // Entering through the face whose outward normal opposes the ray.
                near_sign = -d[a].signum();
            }
            t_far = t_far.min(hi);
        }
        if t_near > t_far || t_far <= 0.0 || t_near <= 0.0 {
            return None;
        }
        let mut n = Vector3::zeros();
        n[near_axis] = near_sign;
        Some(Hit {
            t: t_near,
            normal: rot * n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(c: [f64; 3], r: f64) -> Primitive {
        Primitive::sphere(c, r, [1.0; 3])
    }

    #[test]
    fn sphere_on_axis_hits_front_surface() {
        let hit = sphere([0.0, 0.0, 1.0], 0.2)
            .intersect(&Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert!((hit.t - 0.8).abs() < 1e-12);
        assert!((hit.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn sphere_miss() {
        assert!(sphere([1.0, 0.0, 1.0], 0.2)
            .intersect(&Vector3::new(0.0, 0.0, 1.0))
            .is_none());
    }

    #[test]
    fn sphere_behind_camera_is_ignored() {
        assert!(sphere([0.0, 0.0, -2.0], 0.5)
            .intersect(&Vector3::new(0.0, 0.0, 1.0))
            .is_none());
    }

    #[test]
    fn axis_aligned_box_front_face() {
        let b = Primitive::cuboid(
            [0.0, 0.0, 2.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.5, 0.5, 0.25],
            [1.0; 3],
        );
        let hit = b.intersect(&Vector3::new(0.1, -0.1, 1.0)).unwrap();
        assert!((hit.t - 1.75).abs() < 1e-12);
        assert!((hit.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(b.intersect(&Vector3::new(0.5, 0.0, 1.0)).is_none());
    }

    #[test]
    fn rotated_box_hit_lies_on_surface() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // 90 degrees about z swaps the x and y extents.
        let b = Primitive::cuboid([0.0, 0.0, 2.0], [s, 0.0, 0.0, s], [0.4, 0.1, 0.2], [1.0; 3]);
        let dir = Vector3::new(0.04, 0.0, 1.0);
        assert!(b.intersect(&dir).is_some());
        let dir = Vector3::new(0.0, 0.15, 1.0);
        let hit = b.intersect(&dir).unwrap();
        assert!((hit.t - 1.8).abs() < 1e-12);
        let dir = Vector3::new(0.1, 0.0, 1.0);
        assert!(b.intersect(&dir).is_none());
    }
}
