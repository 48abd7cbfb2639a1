//! Differentiable Gaussian splatting: covariance construction, perspective
//! projection of primitives, tile-binned front-to-back alpha compositing,
//! the analytic backward pass, and a brute-force reference rasterizer used
//! as the correctness oracle.

mod backward;
mod bench;
mod export;
mod forward;
mod reference;

pub use backward::{rasterize_backward, CloudGrads};
pub use bench::{bench_rasterize, random_cloud, BenchResult};
pub use export::{read_cloud, write_cloud};
pub use forward::rasterize;
pub use reference::rasterize_reference;

use crate::geometry::{Camera, CamParams, Z_NEAR};
use crate::linalg::{Mat3, Quat, Sym2, Vec3};
use crate::scalar::Real;
use crate::tensor::Tensor3;

/// Explicit primitive list in structure-of-arrays form; all vectors share
/// length N.
#[derive(Clone, Debug, Default)]
pub struct GaussianCloud<S> {
    pub means: Vec<Vec3<S>>,
    pub quats: Vec<Quat<S>>,
    pub scales: Vec<Vec3<S>>,
    pub opacities: Vec<S>,
    pub rgbs: Vec<[S; 3]>,
}

impl<S: Real> GaussianCloud<S> {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn empty() -> Self {
        GaussianCloud {
            means: Vec::new(),
            quats: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            rgbs: Vec::new(),
        }
    }
}

/// Rendered target view: color, accumulated alpha, alpha-weighted depth.
#[derive(Clone, Debug)]
pub struct RenderOutput<S> {
    pub rgb: Tensor3<S>,
    pub alpha: Tensor3<S>,
    pub depth: Tensor3<S>,
}

/// Rasterizer tunables. Values follow common splatting practice; each is a
/// plain field so tests can pin alternatives.
#[derive(Clone, Copy, Debug)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Per-splat alpha ceiling.
    pub alpha_clamp: f64,
    /// Traversal stops once transmittance drops below this.
    pub transmit_stop: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_floor: f64,
    /// Minimum extent (in sigmas) used for binning and frame culling.
    pub cull_sigma: f64,
    /// Isotropic floor added to the projected covariance (px^2).
    pub lambda_floor: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            alpha_clamp: 0.99,
            transmit_stop: 1e-4,
            alpha_floor: 1.0 / 255.0,
            cull_sigma: 3.0,
            lambda_floor: 0.3,
        }
    }
}

/// A projected primitive ready for compositing.
#[derive(Clone, Copy, Debug)]
pub struct Splat2D<S> {
    pub mean2: [S; 2],
    /// Projected covariance (SPD after the lambda floor).
    pub cov2: Sym2<S>,
    /// Inverse covariance.
    pub conic: Sym2<S>,
    /// View-space z of the mean.
    pub depth: S,
    /// Binning/culling radius in pixels (covers every pixel whose
    /// contribution can reach the alpha floor, never less than cull_sigma
    /// standard deviations).
    pub radius: S,
    pub opacity: S,
    pub rgb: [S; 3],
    /// Index into the source cloud.
    pub index: u32,
}

/// Sigma = R diag(scale^2) R^T for a unit quaternion.
pub fn compute_cov3d<S: Real>(quat: Quat<S>, scale: Vec3<S>) -> Mat3<S> {
    let r = quat.to_mat3();
    let s2 = Vec3::new(scale.x * scale.x, scale.y * scale.y, scale.z * scale.z);
    r.scale_cols(s2).mul_mat(&r.transpose())
}

/// First-order perspective Jacobian at a camera-space point.
#[inline]
pub(crate) fn perspective_jacobian<S: Real>(fx: S, fy: S, p: Vec3<S>) -> [[S; 3]; 2] {
    let z_inv = S::one() / p.z;
    let z_inv2 = z_inv * z_inv;
    [
        [fx * z_inv, S::zero(), -fx * p.x * z_inv2],
        [S::zero(), fy * z_inv, -fy * p.y * z_inv2],
    ]
}

/// Project one primitive; `None` when culled (behind the near plane, below
/// the alpha floor everywhere, or its extent misses the frame).
pub fn project_splat<S: Real>(
    mean: Vec3<S>,
    quat: Quat<S>,
    scale: Vec3<S>,
    opacity: S,
    rgb: [S; 3],
    index: u32,
    cam: &CamParams<S>,
    cfg: &RasterConfig,
) -> Option<Splat2D<S>> {
    if opacity.to_f64x() < cfg.alpha_floor {
        return None;
    }
    let pc = cam.world_to_cam(mean);
    if pc.z <= S::lit(Z_NEAR) {
        return None;
    }
    let mean2 = [cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy];
    let sigma = compute_cov3d(quat.normalized(), scale);
    let j = perspective_jacobian(cam.fx, cam.fy, pc);
    // M = J * W, cov2 = M Sigma M^T + lambda I.
    let w = cam.rot;
    let mut m = [[S::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc += j[r][k] * w.m[k][c];
            }
            m[r][c] = acc;
        }
    }
    let ms = |r: usize| Vec3::new(m[r][0], m[r][1], m[r][2]);
    let row0 = sigma.mul_vec(ms(0));
    let row1 = sigma.mul_vec(ms(1));
    let lam = S::lit(cfg.lambda_floor);
    let cov2 = Sym2 {
        a: ms(0).dot(row0) + lam,
        b: ms(0).dot(row1),
        c: ms(1).dot(row1) + lam,
    };
    let conic = cov2.inverse()?;
    // Extent: cover every pixel where opacity * exp(-q/2) can reach the
    // alpha floor, never below cull_sigma sigmas. Keeps the tiled path
    // consistent with the no-culling reference.
    let (lmax, _) = cov2.eigenvalues();
    let qmax = (2.0 * (opacity.to_f64x() / cfg.alpha_floor).ln()).max(cfg.cull_sigma * cfg.cull_sigma);
    let radius = S::lit(qmax.sqrt()) * lmax.sqrt();
    let (wpx, hpx) = (S::from_usize_(cam.width - 1), S::from_usize_(cam.height - 1));
    if mean2[0] + radius < S::zero()
        || mean2[1] + radius < S::zero()
        || mean2[0] - radius > wpx
        || mean2[1] - radius > hpx
    {
        return None;
    }
    Some(Splat2D { mean2, cov2, conic, depth: pc.z, radius, opacity, rgb, index })
}

/// Project and depth-sort a whole cloud (ascending z, index tiebreak).
pub(crate) fn prepare_splats<S: Real>(
    cloud: &GaussianCloud<S>,
    cam: &CamParams<S>,
    cfg: &RasterConfig,
) -> Vec<Splat2D<S>> {
    let mut splats: Vec<Splat2D<S>> = (0..cloud.len())
        .filter_map(|i| {
            project_splat(
                cloud.means[i],
                cloud.quats[i],
                cloud.scales[i],
                cloud.opacities[i],
                cloud.rgbs[i],
                i as u32,
                cam,
                cfg,
            )
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    splats
}

/// Per-tile index lists of overlapping splats, in depth order.
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the prepared (depth-sorted) splat array.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub(crate) fn build<S: Real>(splats: &[Splat2D<S>], width: usize, height: usize, tile_size: usize) -> TileGrid {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (si, s) in splats.iter().enumerate() {
            let x0 = (s.mean2[0] - s.radius).to_f64x().floor().max(0.0) as usize / tile_size;
            let y0 = (s.mean2[1] - s.radius).to_f64x().floor().max(0.0) as usize / tile_size;
            let x1 = ((s.mean2[0] + s.radius).to_f64x().ceil().max(0.0) as usize).min(width - 1) / tile_size;
            let y1 = ((s.mean2[1] + s.radius).to_f64x().ceil().max(0.0) as usize).min(height - 1) / tile_size;
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    lists[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
        TileGrid { tile_size, tiles_x, tiles_y, lists }
    }
}

/// Forward compositing of one pixel over an ordered splat slice.
/// Shared verbatim by the tiled and reference paths so they agree bitwise.
#[inline]
pub(crate) fn composite_pixel<S: Real>(
    px: S,
    py: S,
    order: &[u32],
    splats: &[Splat2D<S>],
    bg: [S; 3],
    cfg: &RasterConfig,
) -> ([S; 3], S, S) {
    let alpha_floor = S::lit(cfg.alpha_floor);
    let alpha_clamp = S::lit(cfg.alpha_clamp);
    let stop = S::lit(cfg.transmit_stop);
    let half = S::lit(0.5);
    let mut t = S::one();
    let mut color = [S::zero(); 3];
    let mut alpha_sum = S::zero();
    let mut depth_acc = S::zero();
    for &si in order {
        if t < stop {
            break;
        }
        let s = &splats[si as usize];
        let dx = px - s.mean2[0];
        let dy = py - s.mean2[1];
        let q = s.conic.a * dx * dx + (s.conic.b + s.conic.b) * dx * dy + s.conic.c * dy * dy;
        if q < S::zero() {
            continue;
        }
        let g = (-half * q).exp();
        let alpha_raw = s.opacity * g;
        if alpha_raw < alpha_floor {
            continue;
        }
        let alpha = alpha_raw.min(alpha_clamp);
        let w = t * alpha;
        color[0] += s.rgb[0] * w;
        color[1] += s.rgb[1] * w;
        color[2] += s.rgb[2] * w;
        depth_acc += s.depth * w;
        alpha_sum += w;
        t *= S::one() - alpha;
    }
    let rgb = [
        color[0] + t * bg[0],
        color[1] + t * bg[1],
        color[2] + t * bg[2],
    ];
    (rgb, alpha_sum, depth_acc)
}

/// Convenience wrapper taking a full [`Camera`].
pub fn render<S: Real>(
    cloud: &GaussianCloud<S>,
    camera: &Camera,
    background: [S; 3],
    cfg: &RasterConfig,
) -> RenderOutput<S> {
    rasterize(cloud, &camera.params::<S>(), background, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cov3d_identity_quat_is_diag_squared() {
        let sigma = compute_cov3d(Quat::<f64>::identity(), Vec3::new(0.2, 0.3, 0.4));
        assert!((sigma.m[0][0] - 0.04).abs() < 1e-15);
        assert!((sigma.m[1][1] - 0.09).abs() < 1e-15);
        assert!((sigma.m[2][2] - 0.16).abs() < 1e-15);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(sigma.m[i][j].abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cov3d_spectrum_is_rotation_invariant() {
        // Rotated columns are eigenvectors with eigenvalues scale^2.
        let q = Quat::new(0.9f64, 0.2, -0.3, 0.25).normalized();
        let s = Vec3::new(0.5, 1.2, 0.8);
        let sigma = compute_cov3d(q, s);
        let r = q.to_mat3();
        let evs = [s.x * s.x, s.y * s.y, s.z * s.z];
        for k in 0..3 {
            let v = r.col(k);
            let sv = sigma.mul_vec(v);
            let diff = sv - v.scale(evs[k]);
            assert!(diff.norm() < 1e-12, "eigenpair {k} violated by {}", diff.norm());
        }
    }

    #[test]
    fn cov3d_symmetric_and_cholesky_decomposable() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = Quat::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() < 1e-3 {
                continue;
            }
            let q = q.normalized();
            let s = Vec3::new(
                rng.gen_range(0.05..1.5),
                rng.gen_range(0.05..1.5),
                rng.gen_range(0.05..1.5),
            );
            let m = compute_cov3d(q, s);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m.m[i][j] - m.m[j][i]).abs() < 1e-12);
                }
            }
            // 3x3 Cholesky must succeed (strictly positive pivots).
            let mut l = [[0.0f64; 3]; 3];
            let mut ok = true;
            for i in 0..3 {
                for j in 0..=i {
                    let mut sum = m.m[i][j];
                    for k in 0..j {
                        sum -= l[i][k] * l[j][k];
                    }
                    if i == j {
                        if sum <= 0.0 {
                            ok = false;
                        } else {
                            l[i][j] = sum.sqrt();
                        }
                    } else {
                        l[i][j] = sum / l[j][j];
                    }
                }
            }
            assert!(ok, "covariance not positive definite");
        }
    }

    fn test_cam() -> crate::geometry::Camera {
        crate::geometry::Camera {
            intrinsics: crate::geometry::Intrinsics {
                fx: 80.0,
                fy: 80.0,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
            },
            pose: crate::geometry::RigidPose::identity(),
        }
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let cam = test_cam();
        let cfg = RasterConfig::default();
        let v = 0.01f64; // variance = scale^2
        let z = 2.0;
        let s = project_splat(
            Vec3::new(0.0, 0.0, z),
            Quat::identity(),
            Vec3::new(0.1, 0.1, 0.1),
            0.9,
            [1.0, 0.0, 0.0],
            0,
            &cam.params::<f64>(),
            &cfg,
        )
        .unwrap();
        let expected = (80.0 / z) * (80.0 / z) * v + cfg.lambda_floor;
        assert!((s.cov2.a - expected).abs() < 1e-9);
        assert!((s.cov2.c - expected).abs() < 1e-9);
        assert!(s.cov2.b.abs() < 1e-9);
        assert!((s.mean2[0] - 31.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = test_cam();
        let s = project_splat(
            Vec3::new(0.0, 0.0, -1.0f64),
            Quat::identity(),
            Vec3::new(0.1, 0.1, 0.1),
            0.9,
            [1.0; 3],
            0,
            &cam.params::<f64>(),
            &RasterConfig::default(),
        );
        assert!(s.is_none());
    }

    #[test]
    fn projected_covariance_eigenvalues_respect_floor() {
        let cam = test_cam();
        let cfg = RasterConfig::default();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..500 {
            let q = Quat::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() < 1e-3 {
                continue;
            }
            let s = project_splat(
                Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(1.0..4.0)),
                q.normalized(),
                Vec3::new(
                    rng.gen_range(0.001..0.3),
                    rng.gen_range(0.001..0.3),
                    rng.gen_range(0.001..0.3),
                ),
                rng.gen_range(0.1..1.0),
                [1.0; 3],
                0,
                &cam.params::<f64>(),
                &cfg,
            );
            if let Some(s) = s {
                let (l1, l2) = s.cov2.eigenvalues();
                assert!(l2 >= cfg.lambda_floor - 1e-9, "eigenvalue {l2} below floor");
                assert!(l1 >= l2);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
