//! Pinhole camera model and depth-parameterized rays.
//!
//! Convention: camera space is +z forward, +x right, +y down; pixel (0,0) is
//! the top-left corner and pixel centers sit at half-integer offsets. Ray
//! directions are scaled so their camera-space z component is exactly 1,
//! which makes the ray parameter equal to camera depth.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Minimal 3-vector used throughout the geometry code.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Intrinsics plus the rigid world-from-camera transform for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: [[f64; 3]; 3], // world-from-camera
    translation: Vec3,       // camera center in world
}

/// Result of projecting a world point into a camera.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates.
    pub u: f64,
    pub v: f64,
    /// Camera-space depth (z component).
    pub z: f64,
    /// True iff z > 0 and (u, v) lies inside the image.
    pub in_frustum: bool,
}

impl CameraCalib {
    /// Builds a calibration from a row-major 4x4 world-from-camera matrix.
    /// The rotation block must be orthonormal with determinant +1.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_from_camera: [[f64; 4]; 4],
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Data(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Data("image dimensions must be positive".into()));
        }
        let bottom = world_from_camera[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Data(format!("world_from_camera bottom row must be [0,0,0,1], got {bottom:?}")));
        }
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            row.copy_from_slice(&world_from_camera[r][..3]);
        }
        // R^T R = I within 1e-9.
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for (_, row) in rotation.iter().enumerate() {
                    dot += row[i] * row[j];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-9 {
                    return Err(Error::Data(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = rotation[0][0] * (rotation[1][1] * rotation[2][2] - rotation[1][2] * rotation[2][1])
            - rotation[0][1] * (rotation[1][0] * rotation[2][2] - rotation[1][2] * rotation[2][0])
            + rotation[0][2] * (rotation[1][0] * rotation[2][1] - rotation[1][1] * rotation[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("rotation determinant must be +1, got {det}")));
        }
        let translation = Vec3::new(world_from_camera[0][3], world_from_camera[1][3], world_from_camera[2][3]);
        Ok(CameraCalib { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Identity-pose calibration placed at `center`.
    pub fn axis_aligned(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, center: Vec3) -> Self {
        let m = [
            [1.0, 0.0, 0.0, center.x],
            [0.0, 1.0, 0.0, center.y],
            [0.0, 0.0, 1.0, center.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraCalib::new(fx, fy, cx, cy, width, height, m).expect("identity pose is valid")
    }

    pub fn world_from_camera(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    fn rotate_transposed(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[1][0] * v.y + r[2][0] * v.z,
            r[0][1] * v.x + r[1][1] * v.y + r[2][1] * v.z,
            r[0][2] * v.x + r[1][2] * v.y + r[2][2] * v.z,
        )
    }

    /// Ray through continuous pixel coordinates `(u, v)` at time `t`.
    ///
    /// The direction is scaled so that its camera-space z component is 1 and
    /// the ray parameter therefore equals camera depth.
    pub fn ray_for_pixel(&self, u: f64, v: f64, t: f64) -> Result<Ray> {
        if !(0.0..=self.width as f64).contains(&u) || !(0.0..=self.height as f64).contains(&v) {
            return Err(Error::Domain(format!(
                "pixel ({u}, {v}) outside image {}x{}",
                self.width, self.height
            )));
        }
        let dir_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ok(Ray { origin: self.translation, dir: self.rotate(dir_cam), t, pixel: (u, v) })
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn ray_for_pixel_center(&self, i: usize, j: usize, t: f64) -> Result<Ray> {
        self.ray_for_pixel(i as f64 + 0.5, j as f64 + 0.5, t)
    }

    /// Projects a world point; never fails, out-of-view reported via the flag.
    pub fn project(&self, x: Vec3) -> Projection {
        let cam = self.rotate_transposed(x - self.translation);
        let z = cam.z;
        if z <= 0.0 {
            return Projection { u: f64::NAN, v: f64::NAN, z, in_frustum: false };
        }
        let u = self.fx * cam.x / z + self.cx;
        let v = self.fy * cam.y / z + self.cy;
        let inside = (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v);
        Projection { u, v, z, in_frustum: inside }
    }

    /// Nearest integer pixel of a projection, for depth-map lookups.
    pub fn nearest_pixel(&self, p: &Projection) -> (usize, usize) {
        let i = (p.u - 0.5).round().clamp(0.0, self.width as f64 - 1.0) as usize;
        let j = (p.v - 0.5).round().clamp(0.0, self.height as f64 - 1.0) as usize;
        (i, j)
    }
}

/// A depth-parameterized camera ray at a normalized time.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    /// Normalized time in [-1, 1].
    pub t: f64,
    /// Source pixel coordinates.
    pub pixel: (f64, f64),
}

impl Ray {
    /// World position at camera depth `s`.
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.dir.scale(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_cam() -> CameraCalib {
        CameraCalib::axis_aligned(40.0, 42.0, 24.0, 23.0, 48, 48, Vec3::new(0.3, -0.1, 1.0))
    }

    /// Rotation by `angle` about +y, translated.
    fn rotated_cam(angle: f64, center: Vec3) -> CameraCalib {
        let (s, c) = angle.sin_cos();
        let m = [
            [c, 0.0, s, center.x],
            [0.0, 1.0, 0.0, center.y],
            [-s, 0.0, c, center.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraCalib::new(40.0, 40.0, 24.0, 24.0, 48, 48, m).unwrap()
    }

    #[test]
    fn principal_ray_is_forward_axis() {
        let cam = test_cam();
        let ray = cam.ray_for_pixel(24.0, 23.0, 0.0).unwrap();
        assert_eq!(ray.dir, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.origin, cam.center());
    }

    #[test]
    fn neighboring_pixels_differ_by_inverse_focal() {
        let cam = test_cam();
        let a = cam.ray_for_pixel(10.0, 12.0, 0.0).unwrap();
        let b = cam.ray_for_pixel(11.0, 12.0, 0.0).unwrap();
        let d = b.dir - a.dir;
        assert!((d.x - 1.0 / cam.fx).abs() < 1e-15);
        assert!(d.y.abs() < 1e-15 && d.z.abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = test_cam();
        assert!(cam.ray_for_pixel(-1.0, 5.0, 0.0).is_err());
        assert!(cam.ray_for_pixel(5.0, 49.0, 0.0).is_err());
    }

    #[test]
    fn camera_center_not_in_frustum() {
        let cam = rotated_cam(0.4, Vec3::new(1.0, 2.0, 3.0));
        let p = cam.project(cam.center());
        assert!(!p.in_frustum);
    }

    #[test]
    fn principal_axis_point_projects_to_principal_point() {
        let cam = test_cam();
        let x = cam.center() + Vec3::new(0.0, 0.0, 3.0);
        let p = cam.project(x);
        assert!((p.u - cam.cx).abs() < 1e-12);
        assert!((p.v - cam.cy).abs() < 1e-12);
        assert!((p.z - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ray_projection_round_trip() {
        let cam = rotated_cam(-0.3, Vec3::new(0.5, 0.2, -1.0));
        for &(u, v) in &[(0.5, 0.5), (24.5, 31.5), (47.5, 1.5)] {
            let ray = cam.ray_for_pixel(u, v, 0.0).unwrap();
            for &s in &[1.0, 2.5, 7.0] {
                let p = cam.project(ray.at(s));
                assert!(p.in_frustum);
                assert!((p.u - u).abs() < 1e-9, "u: {} vs {}", p.u, u);
                assert!((p.v - v).abs() < 1e-9, "v: {} vs {}", p.v, v);
                assert!((p.z - s).abs() < 1e-9, "depth: {} vs {}", p.z, s);
            }
        }
    }

    #[test]
    fn rejects_bad_rotations() {
        // Determinant -1 (mirror).
        let m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(CameraCalib::new(40.0, 40.0, 24.0, 24.0, 48, 48, m).is_err());
        // Non-orthonormal.
        let m = [
            [1.0, 0.1, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(CameraCalib::new(40.0, 40.0, 24.0, 24.0, 48, 48, m).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_over_random_views(
            angle in -1.2f64..1.2,
            u in 0.0f64..48.0,
            v in 0.0f64..48.0,
            s in 0.05f64..50.0,
        ) {
            let cam = rotated_cam(angle, Vec3::new(0.1, -0.4, 2.0));
            let ray = cam.ray_for_pixel(u, v, 0.0).unwrap();
            // Direction has unit camera-space z by construction.
            let p = cam.project(ray.at(s));
            prop_assert!((p.z - s).abs() < 1e-9 * s.max(1.0));
            prop_assert!((p.u - u).abs() < 1e-9);
            prop_assert!((p.v - v).abs() < 1e-9);
        }
    }
}
