//! 2D convolution forward/backward kernels and the tape node.
//!
//! Weight layout is (ky, kx, cin, cout) with cout contiguous, so the inner
//! loops are saxpy/dot over the output-channel axis. Every output element is
//! produced by exactly one task with a fixed summation order, which keeps
//! results bitwise reproducible at any worker count.

use rayon::prelude::*;

use super::{BackwardCtx, NodeOp, ParamId, ParamStore, Tape, ValueId};
use crate::error::{PgError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

/// Work threshold below which the row loop stays serial.
const PAR_MACS: usize = 200_000;

pub fn conv2d_forward<S: Real>(
    input: &Tensor3<S>,
    weights: &[S],
    bias: &[S],
    spec: &ConvSpec,
) -> Tensor3<S> {
    let (h, w, _) = input.shape();
    let (oh, ow) = spec.out_size(h, w);
    let cout = spec.cout;
    let cin = spec.cin;
    let mut out = Tensor3::zeros(oh, ow, cout);

    let row_job = |y: usize, out_row: &mut [S]| {
        for x in 0..ow {
            let o = &mut out_row[x * cout..(x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..spec.kh {
                let iy = (y * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (x * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = input.pixel(iy as usize, ix as usize);
                    let wbase = ((ky * spec.kw + kx) * cin) * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow.iter()) {
                            *ov += v * wv;
                        }
                    }
                }
            }
        }
    };

    let macs = oh * ow * cout * spec.kh * spec.kw * cin;
    if macs > PAR_MACS && oh > 1 {
        out.data_mut()
            .par_chunks_mut(ow * cout)
            .enumerate()
            .for_each(|(y, row)| row_job(y, row));
    } else {
        for (y, row) in out.data_mut().chunks_mut(ow * cout).enumerate() {
            row_job(y, row);
        }
    }
    out
}

pub fn conv2d_backward_input<S: Real>(
    grad_out: &Tensor3<S>,
    weights: &[S],
    spec: &ConvSpec,
    h: usize,
    w: usize,
) -> Tensor3<S> {
    let (oh, ow, _) = grad_out.shape();
    let cin = spec.cin;
    let cout = spec.cout;
    let mut din = Tensor3::zeros(h, w, cin);

    let row_job = |iy: usize, din_row: &mut [S]| {
        for ix in 0..w {
            let d = &mut din_row[ix * cin..(ix + 1) * cin];
            for ky in 0..spec.kh {
                let t = iy as isize + spec.pad as isize - ky as isize;
                if t < 0 || (t as usize) % spec.stride != 0 {
                    continue;
                }
                let oy = t as usize / spec.stride;
                if oy >= oh {
                    continue;
                }
                for kx in 0..spec.kw {
                    let t = ix as isize + spec.pad as isize - kx as isize;
                    if t < 0 || (t as usize) % spec.stride != 0 {
                        continue;
                    }
                    let ox = t as usize / spec.stride;
                    if ox >= ow {
                        continue;
                    }
                    let g = grad_out.pixel(oy, ox);
                    let wbase = ((ky * spec.kw + kx) * cin) * cout;
                    for (ci, dv) in d.iter_mut().enumerate() {
                        let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut acc = S::zero();
                        for (&gv, &wv) in g.iter().zip(wrow.iter()) {
                            acc += gv * wv;
                        }
                        *dv += acc;
                    }
                }
            }
        }
    };

    let macs = h * w * cin * spec.kh * spec.kw * cout;
    if macs > PAR_MACS && h > 1 {
        din.data_mut()
            .par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(iy, row)| row_job(iy, row));
    } else {
        for (iy, row) in din.data_mut().chunks_mut(w * cin).enumerate() {
            row_job(iy, row);
        }
    }
    din
}

/// dW and dBias for one conv. Each (ky, kx, ci) weight slice is produced by
/// one task scanning all output positions, so accumulation order is fixed.
pub fn conv2d_backward_weights<S: Real>(
    input: &Tensor3<S>,
    grad_out: &Tensor3<S>,
    spec: &ConvSpec,
) -> (Vec<S>, Vec<S>) {
    let (h, w, _) = input.shape();
    let (oh, ow, cout) = grad_out.shape();
    let cin = spec.cin;
    let mut dw = vec![S::zero(); spec.kh * spec.kw * cin * cout];

    let slice_job = |slice_idx: usize, dw_slice: &mut [S]| {
        let ky = slice_idx / (spec.kw * cin);
        let kx = (slice_idx / cin) % spec.kw;
        let ci = slice_idx % cin;
        for oy in 0..oh {
            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let v = input.at(iy as usize, ix as usize, ci);
                let g = grad_out.pixel(oy, ox);
                for (dv, &gv) in dw_slice.iter_mut().zip(g.iter()) {
                    *dv += v * gv;
                }
            }
        }
    };

    let macs = spec.kh * spec.kw * cin * oh * ow * cout;
    if macs > PAR_MACS && spec.kh * spec.kw * cin > 1 {
        dw.par_chunks_mut(cout)
            .enumerate()
            .for_each(|(i, s)| slice_job(i, s));
    } else {
        for (i, s) in dw.chunks_mut(cout).enumerate() {
            slice_job(i, s);
        }
    }

    let mut db = vec![S::zero(); cout];
    for y in 0..oh {
        for x in 0..ow {
            for (d, &g) in db.iter_mut().zip(grad_out.pixel(y, x).iter()) {
                *d += g;
            }
        }
    }
    (dw, db)
}

struct Conv2dOp {
    input: ValueId,
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl<S: Real> NodeOp<S> for Conv2dOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let input = ctx.val(self.input).clone();
        let (h, w, _) = input.shape();
        let weights = ctx.param_data(self.w).to_vec();
        let din = conv2d_backward_input(g, &weights, &self.spec, h, w);
        ctx.add_grad(self.input, din);
        let (dw, db) = conv2d_backward_weights(&input, g, &self.spec);
        let (_, wgrad) = ctx.param_parts(self.w);
        for (a, b) in wgrad.iter_mut().zip(dw.iter()) {
            *a += *b;
        }
        let (_, bgrad) = ctx.param_parts(self.b);
        for (a, b) in bgrad.iter_mut().zip(db.iter()) {
            *a += *b;
        }
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

impl<S: Real> Tape<S> {
    /// 2D convolution with bias. Rejects channel mismatches with a
    /// diagnostic naming both shapes.
    pub fn conv2d(
        &mut self,
        store: &ParamStore<S>,
        input: ValueId,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let wshape = store.buf(w).shape;
        let ishape = self.value(input).shape();
        if wshape.cin != ishape.2 {
            return Err(PgError::shape(format!(
                "conv2d: kernel {}x{}x{}x{} does not accept input {}x{}x{}",
                wshape.kh, wshape.kw, wshape.cin, wshape.cout, ishape.0, ishape.1, ishape.2
            )));
        }
        if stride < 1 {
            return Err(PgError::arg("conv2d stride must be >= 1".into()));
        }
        if store.buf(b).data.len() != wshape.cout {
            return Err(PgError::shape(format!(
                "conv2d: bias length {} != out channels {}",
                store.buf(b).data.len(),
                wshape.cout
            )));
        }
        let spec = ConvSpec {
            kh: wshape.kh,
            kw: wshape.kw,
            cin: wshape.cin,
            cout: wshape.cout,
            stride,
            pad,
        };
        if ishape.0 + 2 * pad < wshape.kh || ishape.1 + 2 * pad < wshape.kw {
            return Err(PgError::shape(format!(
                "conv2d: input {}x{} too small for {}x{} kernel at padding {}",
                ishape.0, ishape.1, wshape.kh, wshape.kw, pad
            )));
        }
        let out = conv2d_forward(self.value(input), &store.buf(w).data, &store.buf(b).data, &spec);
        Ok(self.push(out, Box::new(Conv2dOp { input, w, b, spec })))
    }
}
