//! Dense H x W x C scalar grid, row-major (y, x, c). The universal carrier
//! for images, feature maps, heatmaps, parameter maps, and (as N x 1 x C)
//! per-primitive attribute lists.

use crate::error::{PgError, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<S> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<S>,
}

impl<S: Real> Tensor3<S> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 { h, w, c, data: vec![S::zero(); h * w * c] }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: S) -> Self {
        Tensor3 { h, w, c, data: vec![v; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(PgError::shape(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor3 { h, w, c, data }
    }

    #[inline(always)]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline(always)]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline(always)]
    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.w + x) * self.c + c
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.w + x) * self.c + c]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    #[inline(always)]
    pub fn add_at(&mut self, y: usize, x: usize, c: usize, v: S) {
        let i = self.idx(y, x, c);
        self.data[i] += v;
    }

    /// Contiguous channel slice at one pixel.
    #[inline(always)]
    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline(always)]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [S] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Self {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        self.shape() == o.shape()
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(PgError::NonFinite(context.to_string()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, o: &Self) -> S {
        debug_assert!(self.same_shape(o));
        self.data
            .iter()
            .zip(o.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, v| if v > m { v } else { m })
    }

    pub fn cast<T: Real>(&self) -> Tensor3<T> {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| T::lit(v.to_f64x())).collect(),
        }
    }

    /// Bilinear sample of all channels at a continuous position, zero outside
    /// bounds. Integer coordinates land on pixel centers.
    pub fn sample_bilinear(&self, xf: S, yf: S, out: &mut [S]) {
        debug_assert_eq!(out.len(), self.c);
        out.fill(S::zero());
        let x0f = xf.floor();
        let y0f = yf.floor();
        let fx = xf - x0f;
        let fy = yf - y0f;
        let x0 = x0f.to_f64x() as i64;
        let y0 = y0f.to_f64x() as i64;
        let one = S::one();
        let weights = [
            (x0, y0, (one - fx) * (one - fy)),
            (x0 + 1, y0, fx * (one - fy)),
            (x0, y0 + 1, (one - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for (xi, yi, wgt) in weights {
            if xi < 0 || yi < 0 || xi >= self.w as i64 || yi >= self.h as i64 {
                continue;
            }
            let px = self.pixel(yi as usize, xi as usize);
            for (o, &v) in out.iter_mut().zip(px.iter()) {
                *o += wgt * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_yxc() {
        let t = Tensor3::<f64>::from_fn(2, 3, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        assert_eq!(t.at(1, 2, 1), 121.0);
        assert_eq!(t.data()[t.idx(0, 1, 0)], 10.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor3::<f32>::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn bilinear_identity_at_integer_coords() {
        let t = Tensor3::<f64>::from_fn(4, 4, 3, |y, x, c| (y * 16 + x * 4 + c) as f64);
        let mut out = [0.0; 3];
        t.sample_bilinear(2.0, 1.0, &mut out);
        assert_eq!(out, [t.at(1, 2, 0), t.at(1, 2, 1), t.at(1, 2, 2)]);
    }

    #[test]
    fn bilinear_zero_pads_outside() {
        let t = Tensor3::<f64>::filled(2, 2, 1, 5.0);
        let mut out = [0.0];
        t.sample_bilinear(-1.5, 0.0, &mut out);
        assert_eq!(out[0], 0.0);
        // Halfway off the edge blends with the implicit zero border.
        t.sample_bilinear(-0.5, 0.0, &mut out);
        assert_eq!(out[0], 2.5);
    }

    #[test]
    fn check_finite_rejects_nan() {
        let mut t = Tensor3::<f64>::zeros(1, 1, 1);
        t.set(0, 0, 0, f64::NAN);
        assert!(t.check_finite("test").is_err());
    }
}
