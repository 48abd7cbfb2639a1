//! Pinhole cameras, projection/unprojection, and depth-driven feature
//! warping between views.
//!
//! Conventions, fixed project-wide: extrinsics are world-to-camera
//! (`x_cam = R x_world + t`), camera z is the viewing direction, and integer
//! pixel coordinates land on pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{PgError, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;
use crate::tensor::Tensor3;

/// Guard against division blowups for points grazing the camera plane.
pub const Z_NEAR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(PgError::arg(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(PgError::arg(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera downscaled by an integer factor.
    /// Pixel centers: full-res coordinate u maps to (u + 0.5)/k - 0.5.
    pub fn downscaled(&self, k: usize) -> Intrinsics {
        let kf = k as f64;
        Intrinsics {
            fx: self.fx / kf,
            fy: self.fy / kf,
            cx: (self.cx + 0.5) / kf - 0.5,
            cy: (self.cy + 0.5) / kf - 0.5,
            width: self.width / k,
            height: self.height / k,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    /// Row-major 3x3 rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose { rotation: Mat3::<f64>::identity().m, translation: [0.0; 3] }
    }

    pub fn rot(&self) -> Mat3<f64> {
        Mat3 { m: self.rotation }
    }

    pub fn trans(&self) -> Vec3<f64> {
        Vec3::from_array(self.translation)
    }

    /// Checks orthonormality and positive determinant.
    pub fn validate(&self) -> Result<()> {
        let r = self.rot();
        let rtr = r.transpose().mul_mat(&r);
        let id = Mat3::<f64>::identity();
        let mut max = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                max = max.max((rtr.m[i][j] - id.m[i][j]).abs());
            }
        }
        if max >= 1e-9 {
            return Err(PgError::arg(format!("rotation not orthonormal, |R'R - I| = {max:.3e}")));
        }
        if r.det() <= 0.0 {
            return Err(PgError::arg("rotation determinant must be +1".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
}

/// Projection outcome: a point behind the near plane is reported, never NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { pixel: [f64; 2], depth: f64 },
    BehindCamera,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()
    }

    pub fn world_to_cam(&self, p: Vec3<f64>) -> Vec3<f64> {
        self.pose.rot().mul_vec(p) + self.pose.trans()
    }

    pub fn cam_to_world(&self, p: Vec3<f64>) -> Vec3<f64> {
        self.pose.rot().transpose().mul_vec(p - self.pose.trans())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<f64> {
        self.pose.rot().transpose().mul_vec(-self.pose.trans())
    }

    pub fn project(&self, point: Vec3<f64>) -> Projection {
        let pc = self.world_to_cam(point);
        if pc.z <= Z_NEAR {
            return Projection::BehindCamera;
        }
        let k = &self.intrinsics;
        Projection::Visible {
            pixel: [k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy],
            depth: pc.z,
        }
    }

    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vec3<f64>> {
        if depth <= 0.0 {
            return Err(PgError::arg(format!("unproject requires depth > 0, got {depth}")));
        }
        let k = &self.intrinsics;
        let cam = Vec3::new(
            (pixel[0] - k.cx) / k.fx * depth,
            (pixel[1] - k.cy) / k.fy * depth,
            depth,
        );
        Ok(self.cam_to_world(cam))
    }

    /// Ray through a pixel: (origin, unit direction) in world coordinates.
    pub fn pixel_ray(&self, pixel: [f64; 2]) -> (Vec3<f64>, Vec3<f64>) {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0);
        let dir = self.pose.rot().transpose().mul_vec(dir_cam).normalized();
        (self.center(), dir)
    }

    /// Camera with intrinsics downscaled by `k` (same pose).
    pub fn downscaled(&self, k: usize) -> Camera {
        Camera { intrinsics: self.intrinsics.downscaled(k), pose: self.pose }
    }
}

/// Lightweight camera parameters at the scalar type of a numeric kernel.
#[derive(Clone, Copy, Debug)]
pub struct CamParams<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: usize,
    pub height: usize,
    pub rot: Mat3<S>,
    pub trans: Vec3<S>,
}

impl Camera {
    pub fn params<S: Real>(&self) -> CamParams<S> {
        CamParams {
            fx: S::lit(self.intrinsics.fx),
            fy: S::lit(self.intrinsics.fy),
            cx: S::lit(self.intrinsics.cx),
            cy: S::lit(self.intrinsics.cy),
            width: self.intrinsics.width,
            height: self.intrinsics.height,
            rot: self.pose.rot().cast::<S>(),
            trans: self.pose.trans().cast::<S>(),
        }
    }
}

impl<S: Real> CamParams<S> {
    #[inline]
    pub fn world_to_cam(&self, p: Vec3<S>) -> Vec3<S> {
        self.rot.mul_vec(p) + self.trans
    }

    /// Unproject a pixel at the given depth into world space.
    /// The result is linear in depth: `w = A * d + b`.
    #[inline]
    pub fn unproject_dir(&self, px: S, py: S) -> (Vec3<S>, Vec3<S>) {
        let dir_cam = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, S::one());
        let rt = self.rot.transpose();
        let a = rt.mul_vec(dir_cam);
        let b = rt.mul_vec(-self.trans);
        (a, b)
    }
}

/// Warp `feat` (aligned to the source camera) into the target camera's frame
/// using a per-pixel depth map aligned to the target view.
///
/// Returns the warped features and a binary validity mask: 1 where the
/// reprojected sample lies inside the source image and the depth is positive,
/// 0 (with zeroed features) elsewhere.
pub fn warp_features<S: Real>(
    feat: &Tensor3<S>,
    depth: &Tensor3<S>,
    src_cam: &Camera,
    tgt_cam: &Camera,
) -> Result<(Tensor3<S>, Tensor3<S>)> {
    if depth.channels() != 1 {
        return Err(PgError::shape(format!("depth map must have 1 channel, got {}", depth.channels())));
    }
    if (depth.height(), depth.width()) != (feat.height(), feat.width()) {
        return Err(PgError::shape(format!(
            "depth {}x{} does not match features {}x{}",
            depth.height(),
            depth.width(),
            feat.height(),
            feat.width()
        )));
    }
    let (h, w, c) = feat.shape();
    let src: CamParams<S> = src_cam.params();
    let tgt: CamParams<S> = tgt_cam.params();
    let mut warped = Tensor3::zeros(h, w, c);
    let mut validity = Tensor3::zeros(h, w, 1);
    let znear = S::lit(Z_NEAR);
    for y in 0..h {
        for x in 0..w {
            let d = depth.at(y, x, 0);
            if d <= S::zero() {
                continue;
            }
            let (a, b) = tgt.unproject_dir(S::from_usize_(x), S::from_usize_(y));
            let world = a.scale(d) + b;
            let pc = src.world_to_cam(world);
            if pc.z <= znear {
                continue;
            }
            let u = src.fx * pc.x / pc.z + src.cx;
            let v = src.fy * pc.y / pc.z + src.cy;
            if u < S::zero() || v < S::zero() || u > S::from_usize_(w - 1) || v > S::from_usize_(h - 1) {
                continue;
            }
            feat.sample_bilinear(u, v, warped.pixel_mut(y, x));
            validity.set(y, x, 0, S::one());
        }
    }
    Ok((warped, validity))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> Camera {
        Camera {
            intrinsics: Intrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 64.0, width: 128, height: 128 },
            pose: RigidPose::identity(),
        }
    }

    #[test]
    fn on_axis_projection() {
        let cam = test_camera();
        match cam.project(Vec3::new(0.0, 0.0, 2.0)) {
            Projection::Visible { pixel, depth } => {
                assert_eq!(pixel, [64.0, 64.0]);
                assert_eq!(depth, 2.0);
            }
            _ => panic!("point should be visible"),
        }
    }

    #[test]
    fn off_axis_projection_arithmetic() {
        let cam = test_camera();
        match cam.project(Vec3::new(0.2, 0.0, 2.0)) {
            Projection::Visible { pixel, .. } => {
                assert!((pixel[0] - 74.0).abs() < 1e-12);
                assert!((pixel[1] - 64.0).abs() < 1e-12);
            }
            _ => panic!("point should be visible"),
        }
    }

    #[test]
    fn behind_camera_is_reported_not_nan() {
        let cam = test_camera();
        assert_eq!(cam.project(Vec3::new(0.0, 0.0, -1.0)), Projection::BehindCamera);
    }

    #[test]
    fn unproject_principal_ray() {
        let cam = test_camera();
        let p = cam.unproject([64.0, 64.0], 3.5).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 3.5)).norm() < 1e-12);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let cam = test_camera();
        assert!(cam.unproject([10.0, 10.0], 0.0).is_err());
        assert!(cam.unproject([10.0, 10.0], -1.0).is_err());
    }

    #[test]
    fn translated_camera_shifts_world_point() {
        let cam = test_camera();
        let mut shifted = cam;
        shifted.pose.translation = [1.0, 0.0, 0.0];
        let a = cam.unproject([30.0, 40.0], 2.0).unwrap();
        let b = shifted.unproject([30.0, 40.0], 2.0).unwrap();
        assert!((b - a - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn roundtrip_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut cam = test_camera();
        cam.pose.rotation = Mat3::<f64>::rot_axis(1, 0.3).m;
        cam.pose.translation = [0.2, -0.1, 0.5];
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(1.0..4.0),
            );
            let world = cam.cam_to_world(p);
            match cam.project(world) {
                Projection::Visible { pixel, depth } => {
                    let back = cam.unproject(pixel, depth).unwrap();
                    assert!((back - world).norm() < 1e-9);
                }
                _ => panic!("constructed point must be visible"),
            }
        }
    }

    #[test]
    fn identity_warp_preserves_features() {
        let cam = test_camera().downscaled(8);
        let feat = Tensor3::<f64>::from_fn(16, 16, 4, |y, x, c| (y * 64 + x * 4 + c) as f64 * 0.01);
        let depth = Tensor3::filled(16, 16, 1, 2.0);
        let (warped, validity) = warp_features(&feat, &depth, &cam, &cam).unwrap();
        assert!(warped.max_abs_diff(&feat) < 1e-9);
        assert!(validity.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pure_baseline_warp_is_uniform_shift() {
        // Constant-depth plane, source camera translated by b along world x:
        // the warp samples at u - fx*b/d.
        let tgt = test_camera().downscaled(8);
        let mut src = tgt;
        src.pose.translation = [-0.4, 0.0, 0.0]; // world->cam: camera at world x=+0.4
        let d = 2.0;
        let shift = tgt.intrinsics.fx * 0.4 / d; // fx*b/depth, in feature pixels
        assert!((shift - 2.5).abs() < 1e-12);
        let feat = Tensor3::<f64>::from_fn(16, 16, 1, |_, x, _| x as f64);
        let depth = Tensor3::filled(16, 16, 1, d);
        let (warped, validity) = warp_features(&feat, &depth, &src, &tgt).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expect = x as f64 + shift;
                if expect <= 15.0 {
                    assert!(validity.at(y, x, 0) == 1.0);
                    assert!((warped.at(y, x, 0) - expect).abs() < 1e-9, "at ({y},{x})");
                } else {
                    assert_eq!(validity.at(y, x, 0), 0.0);
                    assert_eq!(warped.at(y, x, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_reprojection_is_invalid_zero() {
        let tgt = test_camera().downscaled(8);
        let mut src = tgt;
        // Source far to the side: everything reprojects outside.
        src.pose.translation = [-100.0, 0.0, 0.0];
        let feat = Tensor3::<f64>::filled(16, 16, 2, 3.0);
        let depth = Tensor3::filled(16, 16, 1, 2.0);
        let (warped, validity) = warp_features(&feat, &depth, &src, &tgt).unwrap();
        assert!(validity.data().iter().all(|&v| v == 0.0));
        assert!(warped.data().iter().all(|&v| v == 0.0));
    }
}
