//! Geometry-aware tape operations: depth-driven warping, the correlation
//! volume and its local lookup, mask gathering, pixel unprojection, and the
//! rotation-map activations.

use super::{BackwardCtx, NodeOp, Tape, ValueId};
use crate::error::{PgError, Result};
use crate::geometry::{CamParams, Z_NEAR};
use crate::linalg::Vec3;
use crate::scalar::Real;
use crate::tensor::Tensor3;

/// Camera pair for a depth-driven warp, both at the working resolution.
#[derive(Clone, Copy, Debug)]
pub struct WarpGeom<S> {
    pub src: CamParams<S>,
    pub tgt: CamParams<S>,
}

/// Reprojection of one target pixel at depth d into another view.
/// The camera-space point is linear in d: pc = alpha * d + beta.
#[inline]
fn reproject<S: Real>(
    tgt: &CamParams<S>,
    other: &CamParams<S>,
    px: S,
    py: S,
    d: S,
) -> Option<(S, S, Vec3<S>, Vec3<S>)> {
    let (a, b) = tgt.unproject_dir(px, py);
    let alpha = other.rot.mul_vec(a);
    let beta = other.rot.mul_vec(b) + other.trans;
    let pc = alpha.scale(d) + beta;
    if pc.z <= S::lit(Z_NEAR) {
        return None;
    }
    let u = other.fx * pc.x / pc.z + other.cx;
    let v = other.fy * pc.y / pc.z + other.cy;
    Some((u, v, alpha, pc))
}

/// d(u)/d(depth) and d(v)/d(depth) at a reprojected point.
#[inline]
fn reproject_ddepth<S: Real>(other: &CamParams<S>, alpha: Vec3<S>, pc: Vec3<S>) -> (S, S) {
    let z2 = pc.z * pc.z;
    (
        other.fx * (alpha.x * pc.z - pc.x * alpha.z) / z2,
        other.fy * (alpha.y * pc.z - pc.y * alpha.z) / z2,
    )
}

struct WarpBilinearOp<S> {
    feat: ValueId,
    depth: ValueId,
    geom: WarpGeom<S>,
}

impl<S: Real> WarpBilinearOp<S> {
    /// (u, v, alpha, pc) for a valid in-bounds sample, else None.
    fn sample_pos(&self, feat: &Tensor3<S>, x: usize, y: usize, d: S) -> Option<(S, S, Vec3<S>, Vec3<S>)> {
        if d <= S::zero() {
            return None;
        }
        let (u, v, alpha, pc) = reproject(
            &self.geom.tgt,
            &self.geom.src,
            S::from_usize_(x),
            S::from_usize_(y),
            d,
        )?;
        let (h, w, _) = feat.shape();
        if u < S::zero() || v < S::zero() || u > S::from_usize_(w - 1) || v > S::from_usize_(h - 1) {
            return None;
        }
        Some((u, v, alpha, pc))
    }
}

impl<S: Real> NodeOp<S> for WarpBilinearOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let feat = ctx.val(self.feat).clone();
        let depth = ctx.val(self.depth).clone();
        let (h, w, c) = feat.shape();
        let mut dfeat = Tensor3::zeros(h, w, c);
        let mut ddepth = Tensor3::zeros(h, w, 1);
        let one = S::one();
        for y in 0..h {
            for x in 0..w {
                let d = depth.at(y, x, 0);
                let Some((u, v, alpha, pc)) = self.sample_pos(&feat, x, y, d) else {
                    continue;
                };
                let gp = g.pixel(y, x);
                let x0 = u.floor();
                let y0 = v.floor();
                let fx = u - x0;
                let fy = v - y0;
                let x0i = x0.to_f64x() as i64;
                let y0i = y0.to_f64x() as i64;
                let corners = [
                    (x0i, y0i, (one - fx) * (one - fy)),
                    (x0i + 1, y0i, fx * (one - fy)),
                    (x0i, y0i + 1, (one - fx) * fy),
                    (x0i + 1, y0i + 1, fx * fy),
                ];
                // Scatter into the feature gradient.
                for (xi, yi, wgt) in corners {
                    if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                        continue;
                    }
                    let dst = dfeat.pixel_mut(yi as usize, xi as usize);
                    for ch in 0..c {
                        dst[ch] += wgt * gp[ch];
                    }
                }
                // Positional derivative of the bilinear sample.
                let fetch = |xi: i64, yi: i64, ch: usize| -> S {
                    if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                        S::zero()
                    } else {
                        feat.at(yi as usize, xi as usize, ch)
                    }
                };
                let (du_dd, dv_dd) = reproject_ddepth(&self.geom.src, alpha, pc);
                let mut acc = S::zero();
                for ch in 0..c {
                    let p00 = fetch(x0i, y0i, ch);
                    let p10 = fetch(x0i + 1, y0i, ch);
                    let p01 = fetch(x0i, y0i + 1, ch);
                    let p11 = fetch(x0i + 1, y0i + 1, ch);
                    let ds_du = (one - fy) * (p10 - p00) + fy * (p11 - p01);
                    let ds_dv = (one - fx) * (p01 - p00) + fx * (p11 - p10);
                    acc += gp[ch] * (ds_du * du_dd + ds_dv * dv_dd);
                }
                ddepth.add_at(y, x, 0, acc);
            }
        }
        ctx.add_grad(self.feat, dfeat);
        ctx.add_grad(self.depth, ddepth);
    }
    fn name(&self) -> &'static str {
        "warp_bilinear"
    }
}

struct CorrVolumeOp<S> {
    tgt: ValueId,
    srcs: Vec<ValueId>,
    norm: S,
}

impl<S: Real> NodeOp<S> for CorrVolumeOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let tgt = ctx.val(self.tgt).clone();
        let (h, w, d) = tgt.shape();
        // d(tgt): sum over sources and k.
        let mut dtgt = Tensor3::zeros(h, w, d);
        for &sid in &self.srcs {
            let src = ctx.val(sid).clone();
            {
                for i in 0..h {
                    for j in 0..w {
                        let gp = g.pixel(i, j);
                        let dst = dtgt.pixel_mut(i, j);
                        for k in 0..w {
                            let gv = gp[k] * self.norm;
                            if gv == S::zero() {
                                continue;
                            }
                            let sp = src.pixel(i, k);
                            for ch in 0..d {
                                dst[ch] += gv * sp[ch];
                            }
                        }
                    }
                }
            }
            let mut dsrc = Tensor3::zeros(h, w, d);
            for i in 0..h {
                for j in 0..w {
                    let gp = g.pixel(i, j);
                    let tp = tgt.pixel(i, j);
                    for k in 0..w {
                        let gv = gp[k] * self.norm;
                        if gv == S::zero() {
                            continue;
                        }
                        let dst = dsrc.pixel_mut(i, k);
                        for ch in 0..d {
                            dst[ch] += gv * tp[ch];
                        }
                    }
                }
            }
            ctx.add_grad(sid, dsrc);
        }
        ctx.add_grad(self.tgt, dtgt);
    }
    fn name(&self) -> &'static str {
        "correlation_volume"
    }
}

/// Camera pair mapping a depth hypothesis to a source column position.
#[derive(Clone, Copy, Debug)]
pub struct LookupGeom<S> {
    pub tgt: CamParams<S>,
    pub partner: CamParams<S>,
}

struct CorrLookupOp<S> {
    volume: ValueId,
    depth: ValueId,
    geom: LookupGeom<S>,
    radius: usize,
}

impl<S: Real> CorrLookupOp<S> {
    fn kstar(&self, x: usize, y: usize, d: S) -> Option<(S, Vec3<S>, Vec3<S>)> {
        if d <= S::zero() {
            return None;
        }
        let (u, _v, alpha, pc) = reproject(
            &self.geom.tgt,
            &self.geom.partner,
            S::from_usize_(x),
            S::from_usize_(y),
            d,
        )?;
        Some((u, alpha, pc))
    }
}

impl<S: Real> NodeOp<S> for CorrLookupOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let vol = ctx.val(self.volume).clone();
        let depth = ctx.val(self.depth).clone();
        let (h, w, kdim) = vol.shape();
        let mut dvol = Tensor3::zeros(h, w, kdim);
        let mut ddepth = Tensor3::zeros(h, w, 1);
        let r = self.radius as isize;
        let one = S::one();
        for y in 0..h {
            for x in 0..w {
                let d = depth.at(y, x, 0);
                let Some((kstar, alpha, pc)) = self.kstar(x, y, d) else {
                    continue;
                };
                let (dk_dd, _) = reproject_ddepth(&self.geom.partner, alpha, pc);
                let gp = g.pixel(y, x);
                let row = vol.pixel(y, x);
                let mut acc = S::zero();
                for o in -r..=r {
                    let gv = gp[(o + r) as usize];
                    let kpos = kstar + S::lit(o as f64);
                    let k0 = kpos.floor();
                    let f = kpos - k0;
                    let k0i = k0.to_f64x() as i64;
                    let c0 = if k0i >= 0 && k0i < kdim as i64 { Some(k0i as usize) } else { None };
                    let c1 = if k0i + 1 >= 0 && k0i + 1 < kdim as i64 { Some((k0i + 1) as usize) } else { None };
                    if gv != S::zero() {
                        if let Some(c0) = c0 {
                            dvol.add_at(y, x, c0, gv * (one - f));
                        }
                        if let Some(c1) = c1 {
                            dvol.add_at(y, x, c1, gv * f);
                        }
                    }
                    let v0 = c0.map_or(S::zero(), |c| row[c]);
                    let v1 = c1.map_or(S::zero(), |c| row[c]);
                    acc += gv * (v1 - v0);
                }
                ddepth.add_at(y, x, 0, acc * dk_dd);
            }
        }
        ctx.add_grad(self.volume, dvol);
        ctx.add_grad(self.depth, ddepth);
    }
    fn name(&self) -> &'static str {
        "correlation_lookup"
    }
}

struct GatherMaskOp {
    a: ValueId,
    pixels: std::sync::Arc<Vec<(u32, u32)>>,
}

impl<S: Real> NodeOp<S> for GatherMaskOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let c = ctx.val(self.a).channels();
        let da = ctx.grad_mut(self.a);
        for (n, &(y, x)) in self.pixels.iter().enumerate() {
            let src = g.pixel(n, 0);
            let dst = da.pixel_mut(y as usize, x as usize);
            for ch in 0..c {
                dst[ch] += src[ch];
            }
        }
    }
    fn name(&self) -> &'static str {
        "gather_mask"
    }
}

struct UnprojectPointsOp<S> {
    depth: ValueId,
    dirs: Vec<Vec3<S>>,
    origin: Vec3<S>,
}

impl<S: Real> NodeOp<S> for UnprojectPointsOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let dd = ctx.grad_mut(self.depth);
        for (n, dir) in self.dirs.iter().enumerate() {
            let gp = g.pixel(n, 0);
            dd.add_at(n, 0, 0, gp[0] * dir.x + gp[1] * dir.y + gp[2] * dir.z);
        }
    }
    fn name(&self) -> &'static str {
        "unproject_points"
    }
}

const AXIS_EPS: f64 = 1e-12;

struct AxisAngleToQuatOp {
    a: ValueId,
}

impl<S: Real> NodeOp<S> for AxisAngleToQuatOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let a = ctx.val(self.a).clone();
        let (h, w, _) = a.shape();
        let da = ctx.grad_mut(self.a);
        let half = S::lit(0.5);
        let pi = S::lit(std::f64::consts::PI);
        let eps = S::lit(AXIS_EPS);
        for y in 0..h {
            for x in 0..w {
                let v = a.pixel(y, x);
                let gp = g.pixel(y, x);
                let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                let n = n2.sqrt();
                let m = n.max(eps);
                let clamped = n >= pi;
                let theta = if clamped { pi } else { n };
                let s = (theta * half).sin() / m;
                let cw = (theta * half).cos();
                // dtheta/dv_j = v_j / n on the unclamped branch, else 0.
                // ds/dn combines both the sin and 1/m dependencies.
                let ds_dn = if n <= eps {
                    S::zero()
                } else if clamped {
                    -(theta * half).sin() / (m * m)
                } else {
                    (cw * half * m - (theta * half).sin()) / (m * m)
                };
                let dw_dn = if clamped || n <= eps { S::zero() } else { -(theta * half).sin() * half };
                let dst = da.pixel_mut(y, x);
                for j in 0..3 {
                    let dn_dv = if n <= eps { S::zero() } else { v[j] / n };
                    let mut acc = gp[0] * dw_dn * dn_dv;
                    for i in 0..3 {
                        let delta = if i == j { s } else { S::zero() };
                        acc += gp[1 + i] * (delta + v[i] * ds_dn * dn_dv);
                    }
                    dst[j] += acc;
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "axis_angle_to_quat"
    }
}

struct NormalizeGroupsOp {
    a: ValueId,
    group: usize,
}

impl<S: Real> NodeOp<S> for NormalizeGroupsOp {
    fn backward(&self, out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let a = ctx.val(self.a).clone();
        let (h, w, c) = a.shape();
        let eps = S::lit(AXIS_EPS);
        let da = ctx.grad_mut(self.a);
        for y in 0..h {
            for x in 0..w {
                let vp = a.pixel(y, x);
                let yp = out.pixel(y, x);
                let gp = g.pixel(y, x);
                let dst = da.pixel_mut(y, x);
                for g0 in (0..c).step_by(self.group) {
                    let v = &vp[g0..g0 + self.group];
                    let yv = &yp[g0..g0 + self.group];
                    let gv = &gp[g0..g0 + self.group];
                    let norm = v.iter().map(|&t| t * t).sum::<S>().sqrt().max(eps);
                    let dot: S = yv.iter().zip(gv.iter()).map(|(&a, &b)| a * b).sum();
                    for i in 0..self.group {
                        dst[g0 + i] += (gv[i] - yv[i] * dot) / norm;
                    }
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "normalize_groups"
    }
}

impl<S: Real> Tape<S> {
    /// Warp `feat` into the target frame using per-pixel depth; differentiable
    /// in both the features and the depth map. Returns the warped features and
    /// a (non-differentiable) binary validity mask.
    pub fn warp_bilinear(
        &mut self,
        feat: ValueId,
        depth: ValueId,
        geom: WarpGeom<S>,
    ) -> Result<(ValueId, Tensor3<S>)> {
        let (h, w, c) = self.value(feat).shape();
        let ds = self.value(depth).shape();
        if ds != (h, w, 1) {
            return Err(PgError::shape(format!("warp: depth {ds:?} vs features {h}x{w}x{c}")));
        }
        let op = WarpBilinearOp { feat, depth, geom };
        let fv = self.value(feat);
        let dv = self.value(depth);
        let mut out = Tensor3::zeros(h, w, c);
        let mut validity = Tensor3::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let d = dv.at(y, x, 0);
                if let Some((u, v, _, _)) = op.sample_pos(fv, x, y, d) {
                    fv.sample_bilinear(u, v, out.pixel_mut(y, x));
                    validity.set(y, x, 0, S::one());
                }
            }
        }
        Ok((self.push(out, Box::new(op)), validity))
    }

    /// Correlation volume C(i,j,k) = norm * sum_s sum_h t(i,j,h) src_s(i,k,h),
    /// normalized by 1/sqrt(channels).
    pub fn correlation_volume(&mut self, tgt: ValueId, srcs: &[ValueId]) -> Result<ValueId> {
        let (h, w, d) = self.value(tgt).shape();
        for &sid in srcs {
            let s = self.value(sid).shape();
            if s != (h, w, d) {
                return Err(PgError::shape(format!(
                    "correlation_volume: source {s:?} vs target {h}x{w}x{d}"
                )));
            }
        }
        if srcs.is_empty() {
            return Err(PgError::arg("correlation_volume needs at least one source".into()));
        }
        let norm = S::one() / S::from_usize_(d).sqrt();
        let mut out = Tensor3::zeros(h, w, w);
        for &sid in srcs {
            let tv = self.value(tgt);
            let sv = self.value(sid);
            for i in 0..h {
                for j in 0..w {
                    let tp = tv.pixel(i, j);
                    let dst = out.pixel_mut(i, j);
                    for k in 0..w {
                        let sp = sv.pixel(i, k);
                        let mut acc = S::zero();
                        for ch in 0..d {
                            acc += tp[ch] * sp[ch];
                        }
                        dst[k] += acc * norm;
                    }
                }
            }
        }
        Ok(self.push(out, Box::new(CorrVolumeOp { tgt, srcs: srcs.to_vec(), norm })))
    }

    /// Gather 2*radius+1 linear samples of C(i,j,.) centered at the source
    /// column k*(i,j) obtained by reprojecting the depth hypothesis.
    /// Out-of-range positions sample as zero.
    pub fn lookup_correlation(
        &mut self,
        volume: ValueId,
        depth: ValueId,
        geom: LookupGeom<S>,
        radius: usize,
    ) -> Result<ValueId> {
        let (h, w, kdim) = self.value(volume).shape();
        let ds = self.value(depth).shape();
        if ds != (h, w, 1) {
            return Err(PgError::shape(format!("lookup: depth {ds:?} vs volume {h}x{w}x{kdim}")));
        }
        let op = CorrLookupOp { volume, depth, geom, radius };
        let vol = self.value(volume);
        let dv = self.value(depth);
        let r = radius as isize;
        let one = S::one();
        let mut out = Tensor3::zeros(h, w, 2 * radius + 1);
        for y in 0..h {
            for x in 0..w {
                let d = dv.at(y, x, 0);
                let Some((kstar, _, _)) = op.kstar(x, y, d) else {
                    continue;
                };
                let row = vol.pixel(y, x);
                let dst = out.pixel_mut(y, x);
                for o in -r..=r {
                    let kpos = kstar + S::lit(o as f64);
                    let k0 = kpos.floor();
                    let f = kpos - k0;
                    let k0i = k0.to_f64x() as i64;
                    let mut v = S::zero();
                    if k0i >= 0 && k0i < kdim as i64 {
                        v += (one - f) * row[k0i as usize];
                    }
                    if k0i + 1 >= 0 && k0i + 1 < kdim as i64 {
                        v += f * row[(k0i + 1) as usize];
                    }
                    dst[(o + r) as usize] = v;
                }
            }
        }
        Ok(self.push(out, Box::new(op)))
    }

    /// Select the listed pixels into an N x 1 x C tensor (row-major order of
    /// the pixel list). The inverse scatter is the backward pass.
    pub fn gather_pixels(
        &mut self,
        a: ValueId,
        pixels: std::sync::Arc<Vec<(u32, u32)>>,
    ) -> ValueId {
        let c = self.value(a).channels();
        let src = self.value(a);
        let mut out = Tensor3::zeros(pixels.len().max(0), 1, c);
        for (n, &(y, x)) in pixels.iter().enumerate() {
            out.pixel_mut(n, 0).copy_from_slice(src.pixel(y as usize, x as usize));
        }
        self.push(out, Box::new(GatherMaskOp { a, pixels }))
    }

    /// Lift per-pixel depths (N x 1 x 1, aligned with `pixels`) to world-space
    /// points through the camera: p = dir(u,v) * d + origin.
    pub fn unproject_points(
        &mut self,
        depth: ValueId,
        pixels: &[(u32, u32)],
        cam: &CamParams<S>,
    ) -> Result<ValueId> {
        let ds = self.value(depth).shape();
        if ds != (pixels.len(), 1, 1) {
            return Err(PgError::shape(format!(
                "unproject_points: depth {ds:?} vs {} pixels",
                pixels.len()
            )));
        }
        let mut dirs = Vec::with_capacity(pixels.len());
        let mut origin = Vec3::zero();
        for &(y, x) in pixels {
            let (a, b) = cam.unproject_dir(S::from_usize_(x as usize), S::from_usize_(y as usize));
            dirs.push(a);
            origin = b; // same for every pixel
        }
        let dv = self.value(depth);
        let mut out = Tensor3::zeros(pixels.len(), 1, 3);
        for n in 0..pixels.len() {
            let p = dirs[n].scale(dv.at(n, 0, 0)) + origin;
            let dst = out.pixel_mut(n, 0);
            dst[0] = p.x;
            dst[1] = p.y;
            dst[2] = p.z;
        }
        Ok(self.push(out, Box::new(UnprojectPointsOp { depth, dirs, origin })))
    }

    /// Map a 3-channel rotation field to unit quaternions via the axis-angle
    /// exponential map, with the angle clamped to pi.
    pub fn axis_angle_to_quat(&mut self, a: ValueId) -> Result<ValueId> {
        let (h, w, c) = self.value(a).shape();
        if c != 3 {
            return Err(PgError::shape(format!("axis_angle_to_quat expects 3 channels, got {c}")));
        }
        let src = self.value(a);
        let half = S::lit(0.5);
        let pi = S::lit(std::f64::consts::PI);
        let eps = S::lit(AXIS_EPS);
        let mut out = Tensor3::zeros(h, w, 4);
        for y in 0..h {
            for x in 0..w {
                let v = src.pixel(y, x);
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let theta = n.min(pi);
                let m = n.max(eps);
                let s = (theta * half).sin() / m;
                let dst = out.pixel_mut(y, x);
                dst[0] = (theta * half).cos();
                dst[1] = v[0] * s;
                dst[2] = v[1] * s;
                dst[3] = v[2] * s;
            }
        }
        Ok(self.push(out, Box::new(AxisAngleToQuatOp { a })))
    }

    /// L2-normalize each channel group of the given size per pixel.
    pub fn normalize_groups(&mut self, a: ValueId, group: usize) -> Result<ValueId> {
        let (h, w, c) = self.value(a).shape();
        if group == 0 || c % group != 0 {
            return Err(PgError::shape(format!("normalize_groups: {c} channels not divisible by {group}")));
        }
        let src = self.value(a);
        let eps = S::lit(AXIS_EPS);
        let mut out = Tensor3::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let vp = src.pixel(y, x);
                let dst = out.pixel_mut(y, x);
                for g0 in (0..c).step_by(group) {
                    let v = &vp[g0..g0 + group];
                    let norm = v.iter().map(|&t| t * t).sum::<S>().sqrt().max(eps);
                    for i in 0..group {
                        dst[g0 + i] = v[i] / norm;
                    }
                }
            }
        }
        Ok(self.push(out, Box::new(NormalizeGroupsOp { a, group })))
    }
}
