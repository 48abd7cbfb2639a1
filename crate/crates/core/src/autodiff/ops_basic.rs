//! Elementwise and structural tape operations.

use super::{BackwardCtx, NodeOp, Tape, ValueId};
use crate::error::{PgError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Sin,
    Cos,
}

fn unary_forward<S: Real>(kind: UnaryKind, x: S) -> S {
    match kind {
        UnaryKind::Relu => {
            if x > S::zero() {
                x
            } else {
                S::zero()
            }
        }
        UnaryKind::Sigmoid => S::one() / (S::one() + (-x).exp()),
        UnaryKind::Tanh => x.tanh(),
        // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
        UnaryKind::Softplus => x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
    }
}

fn unary_deriv<S: Real>(kind: UnaryKind, x: S, y: S) -> S {
    match kind {
        UnaryKind::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        UnaryKind::Sigmoid => y * (S::one() - y),
        UnaryKind::Tanh => S::one() - y * y,
        UnaryKind::Softplus => S::one() / (S::one() + (-x).exp()),
        UnaryKind::Abs => {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        }
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
    }
}

struct UnaryOp {
    a: ValueId,
    kind: UnaryKind,
}

impl<S: Real> NodeOp<S> for UnaryOp {
    fn backward(&self, out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let x = ctx.val(self.a).clone();
        let da = ctx.grad_mut(self.a);
        for i in 0..g.len() {
            da.data_mut()[i] += g.data()[i] * unary_deriv(self.kind, x.data()[i], out.data()[i]);
        }
    }
    fn name(&self) -> &'static str {
        "unary"
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinOp {
    a: ValueId,
    b: ValueId,
    kind: BinKind,
}

impl<S: Real> NodeOp<S> for BinOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        match self.kind {
            BinKind::Add => {
                ctx.add_grad(self.a, g.clone());
                ctx.add_grad(self.b, g.clone());
            }
            BinKind::Sub => {
                ctx.add_grad(self.a, g.clone());
                let db = ctx.grad_mut(self.b);
                for i in 0..g.len() {
                    db.data_mut()[i] -= g.data()[i];
                }
            }
            BinKind::Mul => {
                let av = ctx.val(self.a).clone();
                let bv = ctx.val(self.b).clone();
                {
                    let da = ctx.grad_mut(self.a);
                    for i in 0..g.len() {
                        da.data_mut()[i] += g.data()[i] * bv.data()[i];
                    }
                }
                let db = ctx.grad_mut(self.b);
                for i in 0..g.len() {
                    db.data_mut()[i] += g.data()[i] * av.data()[i];
                }
            }
            BinKind::Div => {
                let av = ctx.val(self.a).clone();
                let bv = ctx.val(self.b).clone();
                {
                    let da = ctx.grad_mut(self.a);
                    for i in 0..g.len() {
                        da.data_mut()[i] += g.data()[i] / bv.data()[i];
                    }
                }
                let db = ctx.grad_mut(self.b);
                for i in 0..g.len() {
                    let b = bv.data()[i];
                    db.data_mut()[i] -= g.data()[i] * av.data()[i] / (b * b);
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "binary"
    }
}

struct ScaleOp<S> {
    a: ValueId,
    k: S,
}

impl<S: Real> NodeOp<S> for ScaleOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let da = ctx.grad_mut(self.a);
        for i in 0..g.len() {
            da.data_mut()[i] += g.data()[i] * self.k;
        }
    }
    fn name(&self) -> &'static str {
        "scale"
    }
}

struct AddScalarOp<S> {
    a: ValueId,
    _k: S,
}

impl<S: Real> NodeOp<S> for AddScalarOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        ctx.add_grad(self.a, g.clone());
    }
    fn name(&self) -> &'static str {
        "add_scalar"
    }
}

struct ClampMinOp<S> {
    a: ValueId,
    min: S,
}

impl<S: Real> NodeOp<S> for ClampMinOp<S> {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let x = ctx.val(self.a).clone();
        let da = ctx.grad_mut(self.a);
        for i in 0..g.len() {
            // Zero gradient on the clamped region (boundary included).
            if x.data()[i] > self.min {
                da.data_mut()[i] += g.data()[i];
            }
        }
    }
    fn name(&self) -> &'static str {
        "clamp_min"
    }
}

struct ConcatCOp {
    inputs: Vec<ValueId>,
}

impl<S: Real> NodeOp<S> for ConcatCOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (h, w, _) = g.shape();
        let mut offset = 0;
        for &id in &self.inputs {
            let c = ctx.val(id).channels();
            let mut part = Tensor3::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    let src = &g.pixel(y, x)[offset..offset + c];
                    part.pixel_mut(y, x).copy_from_slice(src);
                }
            }
            ctx.add_grad(id, part);
            offset += c;
        }
    }
    fn name(&self) -> &'static str {
        "concat_c"
    }
}

struct SliceCOp {
    a: ValueId,
    from: usize,
    to: usize,
}

impl<S: Real> NodeOp<S> for SliceCOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (h, w, _) = g.shape();
        let da = ctx.grad_mut(self.a);
        for y in 0..h {
            for x in 0..w {
                let src = g.pixel(y, x);
                let dst = &mut da.pixel_mut(y, x)[self.from..self.to];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += s;
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "slice_c"
    }
}

struct ConcatRowsOp {
    inputs: Vec<ValueId>,
}

impl<S: Real> NodeOp<S> for ConcatRowsOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let mut row = 0;
        for &id in &self.inputs {
            let (h, w, c) = ctx.val(id).shape();
            let mut part = Tensor3::zeros(h, w, c);
            let n = h * w * c;
            let base = row * w * c;
            part.data_mut().copy_from_slice(&g.data()[base..base + n]);
            ctx.add_grad(id, part);
            row += h;
        }
    }
    fn name(&self) -> &'static str {
        "concat_rows"
    }
}

struct GlobalAvgPoolOp {
    a: ValueId,
}

impl<S: Real> NodeOp<S> for GlobalAvgPoolOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (h, w, c) = ctx.val(self.a).shape();
        let inv = S::one() / S::from_usize_(h * w);
        let da = ctx.grad_mut(self.a);
        for y in 0..h {
            for x in 0..w {
                let dst = da.pixel_mut(y, x);
                for ch in 0..c {
                    dst[ch] += g.data()[ch] * inv;
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
}

struct BroadcastMulCOp {
    a: ValueId,
    gains: ValueId,
}

impl<S: Real> NodeOp<S> for BroadcastMulCOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let a = ctx.val(self.a).clone();
        let gains = ctx.val(self.gains).clone();
        let (h, w, c) = a.shape();
        {
            let da = ctx.grad_mut(self.a);
            for y in 0..h {
                for x in 0..w {
                    let gp = g.pixel(y, x);
                    let dst = da.pixel_mut(y, x);
                    for ch in 0..c {
                        dst[ch] += gp[ch] * gains.data()[ch];
                    }
                }
            }
        }
        let dg = ctx.grad_mut(self.gains);
        for y in 0..h {
            for x in 0..w {
                let gp = g.pixel(y, x);
                let ap = a.pixel(y, x);
                for ch in 0..c {
                    dg.data_mut()[ch] += gp[ch] * ap[ch];
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "broadcast_mul_c"
    }
}

struct BroadcastMulScalarOp {
    a: ValueId,
    s: ValueId,
}

impl<S: Real> NodeOp<S> for BroadcastMulScalarOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let a = ctx.val(self.a).clone();
        let sv = ctx.val(self.s).data()[0];
        {
            let da = ctx.grad_mut(self.a);
            for i in 0..g.len() {
                da.data_mut()[i] += g.data()[i] * sv;
            }
        }
        let ds = ctx.grad_mut(self.s);
        let mut acc = S::zero();
        for i in 0..g.len() {
            acc += g.data()[i] * a.data()[i];
        }
        ds.data_mut()[0] += acc;
    }
    fn name(&self) -> &'static str {
        "broadcast_mul_scalar"
    }
}

struct UpsampleNearest2xOp {
    a: ValueId,
}

impl<S: Real> NodeOp<S> for UpsampleNearest2xOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (ih, iw, c) = ctx.val(self.a).shape();
        let da = ctx.grad_mut(self.a);
        for y in 0..ih * 2 {
            for x in 0..iw * 2 {
                let gp = g.pixel(y, x);
                let dst = da.pixel_mut(y / 2, x / 2);
                for ch in 0..c {
                    dst[ch] += gp[ch];
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "upsample_nearest_2x"
    }
}

/// Bilinear resize weights: output position -> (x0, fx) with edge clamping.
fn resize_coord<S: Real>(o: usize, osize: usize, isize_: usize) -> (usize, usize, S) {
    let scale = isize_ as f64 / osize as f64;
    let pos = (o as f64 + 0.5) * scale - 0.5;
    let clamped = pos.max(0.0).min((isize_ - 1) as f64);
    let i0 = clamped.floor();
    let f = clamped - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(isize_ - 1);
    (i0, i1, S::lit(f))
}

struct UpsampleBilinearOp {
    a: ValueId,
}

impl<S: Real> NodeOp<S> for UpsampleBilinearOp {
    fn backward(&self, out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (ih, iw, c) = ctx.val(self.a).shape();
        let (oh, ow, _) = out.shape();
        let da = ctx.grad_mut(self.a);
        let one = S::one();
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coord::<S>(oy, oh, ih);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coord::<S>(ox, ow, iw);
                let gp = g.pixel(oy, ox);
                let w00 = (one - fx) * (one - fy);
                let w10 = fx * (one - fy);
                let w01 = (one - fx) * fy;
                let w11 = fx * fy;
                for ch in 0..c {
                    let gv = gp[ch];
                    da.add_at(y0, x0, ch, gv * w00);
                    da.add_at(y0, x1, ch, gv * w10);
                    da.add_at(y1, x0, ch, gv * w01);
                    da.add_at(y1, x1, ch, gv * w11);
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

struct LumaOp {
    a: ValueId,
}

impl<S: Real> NodeOp<S> for LumaOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (h, w, _) = ctx.val(self.a).shape();
        let weights = [S::lit(LUMA_R), S::lit(LUMA_G), S::lit(LUMA_B)];
        let da = ctx.grad_mut(self.a);
        for y in 0..h {
            for x in 0..w {
                let gv = g.at(y, x, 0);
                let dst = da.pixel_mut(y, x);
                for ch in 0..3 {
                    dst[ch] += gv * weights[ch];
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "luma"
    }
}

/// Separable depthwise blur, valid padding (output shrinks by 2*radius).
pub(crate) fn blur_valid_forward<S: Real>(a: &Tensor3<S>, k: &[S]) -> Tensor3<S> {
    let (h, w, c) = a.shape();
    let r = k.len() / 2;
    // Horizontal pass.
    let mut tmp = Tensor3::zeros(h, w - 2 * r, c);
    for y in 0..h {
        for x in 0..w - 2 * r {
            let dst = tmp.pixel_mut(y, x);
            for (i, &kv) in k.iter().enumerate() {
                let src = a.pixel(y, x + i);
                for ch in 0..c {
                    dst[ch] += kv * src[ch];
                }
            }
        }
    }
    // Vertical pass.
    let mut out = Tensor3::zeros(h - 2 * r, w - 2 * r, c);
    for y in 0..h - 2 * r {
        for x in 0..w - 2 * r {
            let dst = out.pixel_mut(y, x);
            for (i, &kv) in k.iter().enumerate() {
                let src = tmp.pixel(y + i, x);
                for ch in 0..c {
                    dst[ch] += kv * src[ch];
                }
            }
        }
    }
    out
}

struct BlurValidOp<S> {
    a: ValueId,
    kernel: Vec<S>,
}

impl<S: Real> NodeOp<S> for BlurValidOp<S> {
    fn backward(&self, out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (ih, iw, c) = ctx.val(self.a).shape();
        let (oh, ow, _) = out.shape();
        let k = &self.kernel;
        let r = k.len() / 2;
        // Transpose of the vertical pass.
        let mut dtmp = Tensor3::zeros(ih, iw - 2 * r, c);
        for y in 0..oh {
            for x in 0..ow {
                let gp = g.pixel(y, x);
                for (i, &kv) in k.iter().enumerate() {
                    let dst = dtmp.pixel_mut(y + i, x);
                    for ch in 0..c {
                        dst[ch] += kv * gp[ch];
                    }
                }
            }
        }
        // Transpose of the horizontal pass.
        let da = ctx.grad_mut(self.a);
        for y in 0..ih {
            for x in 0..iw - 2 * r {
                let gp = dtmp.pixel(y, x);
                for (i, &kv) in k.iter().enumerate() {
                    let dst = da.pixel_mut(y, x + i);
                    for ch in 0..c {
                        dst[ch] += kv * gp[ch];
                    }
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "blur_valid"
    }
}

struct SumAllOp {
    a: ValueId,
    scale: f64,
}

impl<S: Real> NodeOp<S> for SumAllOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let gv = g.data()[0] * S::lit(self.scale);
        let da = ctx.grad_mut(self.a);
        for v in da.data_mut().iter_mut() {
            *v += gv;
        }
    }
    fn name(&self) -> &'static str {
        "sum_all"
    }
}

struct OuterProductOp {
    a: ValueId,
    b: ValueId,
}

impl<S: Real> NodeOp<S> for OuterProductOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let av = ctx.val(self.a).clone();
        let bv = ctx.val(self.b).clone();
        let (h, w, ca) = av.shape();
        let cb = bv.channels();
        {
            let da = ctx.grad_mut(self.a);
            for y in 0..h {
                for x in 0..w {
                    let gp = g.pixel(y, x);
                    let bp = bv.pixel(y, x);
                    let dst = da.pixel_mut(y, x);
                    for i in 0..ca {
                        let mut acc = S::zero();
                        for j in 0..cb {
                            acc += gp[i * cb + j] * bp[j];
                        }
                        dst[i] += acc;
                    }
                }
            }
        }
        let db = ctx.grad_mut(self.b);
        for y in 0..h {
            for x in 0..w {
                let gp = g.pixel(y, x);
                let ap = av.pixel(y, x);
                let dst = db.pixel_mut(y, x);
                for j in 0..cb {
                    let mut acc = S::zero();
                    for i in 0..ca {
                        acc += gp[i * cb + j] * ap[i];
                    }
                    dst[j] += acc;
                }
            }
        }
    }
    fn name(&self) -> &'static str {
        "outer_product"
    }
}

impl<S: Real> Tape<S> {
    fn unary(&mut self, a: ValueId, kind: UnaryKind) -> ValueId {
        let out = self.value(a).map(|v| unary_forward(kind, v));
        self.push(out, Box::new(UnaryOp { a, kind }))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn tanh_op(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn abs_op(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn sin_op(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Sin)
    }

    pub fn cos_op(&mut self, a: ValueId) -> ValueId {
        self.unary(a, UnaryKind::Cos)
    }

    fn binary(&mut self, a: ValueId, b: ValueId, kind: BinKind) -> Result<ValueId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(PgError::shape(format!("elementwise op on {sa:?} vs {sb:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<S> = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            })
            .collect();
        let out = Tensor3::from_vec(sa.0, sa.1, sa.2, data)?;
        Ok(self.push(out, Box::new(BinOp { a, b, kind })))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn scale(&mut self, a: ValueId, k: S) -> ValueId {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Box::new(ScaleOp { a, k }))
    }

    pub fn add_scalar(&mut self, a: ValueId, k: S) -> ValueId {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Box::new(AddScalarOp { a, _k: k }))
    }

    pub fn clamp_min(&mut self, a: ValueId, min: S) -> ValueId {
        let out = self.value(a).map(|v| v.max(min));
        self.push(out, Box::new(ClampMinOp { a, min }))
    }

    /// Channel concatenation; all inputs must share spatial dims.
    pub fn concat_c(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(PgError::arg("concat_c of zero tensors".into()));
        }
        let (h, w, _) = self.value(inputs[0]).shape();
        let mut c_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if (s.0, s.1) != (h, w) {
                return Err(PgError::shape(format!(
                    "concat_c spatial mismatch: {:?} vs {}x{}",
                    s, h, w
                )));
            }
            c_total += s.2;
        }
        let mut out = Tensor3::zeros(h, w, c_total);
        let mut off = 0;
        for &id in inputs {
            let src = self.value(id);
            let c = src.channels();
            for y in 0..h {
                for x in 0..w {
                    out.pixel_mut(y, x)[off..off + c].copy_from_slice(src.pixel(y, x));
                }
            }
            off += c;
        }
        Ok(self.push(out, Box::new(ConcatCOp { inputs: inputs.to_vec() })))
    }

    pub fn slice_c(&mut self, a: ValueId, from: usize, to: usize) -> Result<ValueId> {
        let (h, w, c) = self.value(a).shape();
        if from >= to || to > c {
            return Err(PgError::arg(format!("slice_c {from}..{to} out of {c} channels")));
        }
        let src = self.value(a);
        let mut out = Tensor3::zeros(h, w, to - from);
        for y in 0..h {
            for x in 0..w {
                out.pixel_mut(y, x).copy_from_slice(&src.pixel(y, x)[from..to]);
            }
        }
        Ok(self.push(out, Box::new(SliceCOp { a, from, to })))
    }

    /// Stack along the row axis: inputs (h_i, w, c) -> (sum h_i, w, c).
    pub fn concat_rows(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(PgError::arg("concat_rows of zero tensors".into()));
        }
        let (_, w, c) = self.value(inputs[0]).shape();
        let mut h_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if (s.1, s.2) != (w, c) {
                return Err(PgError::shape(format!("concat_rows mismatch: {s:?} vs _x{w}x{c}")));
            }
            h_total += s.0;
        }
        let mut data = Vec::with_capacity(h_total * w * c);
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let out = Tensor3::from_vec(h_total, w, c, data)?;
        Ok(self.push(out, Box::new(ConcatRowsOp { inputs: inputs.to_vec() })))
    }

    /// Global average pool to a 1x1xC value.
    pub fn global_avg_pool(&mut self, a: ValueId) -> ValueId {
        let (h, w, c) = self.value(a).shape();
        let inv = S::one() / S::from_usize_(h * w);
        let mut pooled = vec![S::zero(); c];
        let src = self.value(a);
        for y in 0..h {
            for x in 0..w {
                for (p, &v) in pooled.iter_mut().zip(src.pixel(y, x).iter()) {
                    *p += v;
                }
            }
        }
        for p in pooled.iter_mut() {
            *p *= inv;
        }
        let out = Tensor3::from_vec(1, 1, c, pooled).expect("pool shape");
        self.push(out, Box::new(GlobalAvgPoolOp { a }))
    }

    /// Multiply per channel by a 1x1xC gains value.
    pub fn broadcast_mul_c(&mut self, a: ValueId, gains: ValueId) -> Result<ValueId> {
        let (h, w, c) = self.value(a).shape();
        let gs = self.value(gains).shape();
        if gs != (1, 1, c) {
            return Err(PgError::shape(format!("gains {gs:?} incompatible with {c} channels")));
        }
        let src = self.value(a);
        let gv = self.value(gains);
        let mut out = Tensor3::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(y, x);
                let sp = src.pixel(y, x);
                for ch in 0..c {
                    dst[ch] = sp[ch] * gv.data()[ch];
                }
            }
        }
        Ok(self.push(out, Box::new(BroadcastMulCOp { a, gains })))
    }

    /// Multiply every element by a 1x1x1 scalar value.
    pub fn broadcast_mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        if self.value(s).shape() != (1, 1, 1) {
            return Err(PgError::shape("broadcast_mul_scalar needs a 1x1x1 scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).map(|v| v * sv);
        Ok(self.push(out, Box::new(BroadcastMulScalarOp { a, s })))
    }

    pub fn upsample_nearest_2x(&mut self, a: ValueId) -> ValueId {
        let (h, w, c) = self.value(a).shape();
        let src = self.value(a);
        let mut out = Tensor3::zeros(h * 2, w * 2, c);
        for y in 0..h * 2 {
            for x in 0..w * 2 {
                out.pixel_mut(y, x).copy_from_slice(src.pixel(y / 2, x / 2));
            }
        }
        self.push(out, Box::new(UpsampleNearest2xOp { a }))
    }

    /// Bilinear resize to (oh, ow) with edge clamping.
    pub fn upsample_bilinear(&mut self, a: ValueId, oh: usize, ow: usize) -> ValueId {
        let (ih, iw, c) = self.value(a).shape();
        let src = self.value(a);
        let mut out = Tensor3::zeros(oh, ow, c);
        let one = S::one();
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coord::<S>(oy, oh, ih);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coord::<S>(ox, ow, iw);
                let dst = out.pixel_mut(oy, ox);
                let p00 = src.pixel(y0, x0);
                let p10 = src.pixel(y0, x1);
                let p01 = src.pixel(y1, x0);
                let p11 = src.pixel(y1, x1);
                let w00 = (one - fx) * (one - fy);
                let w10 = fx * (one - fy);
                let w01 = (one - fx) * fy;
                let w11 = fx * fy;
                for ch in 0..c {
                    dst[ch] = p00[ch] * w00 + p10[ch] * w10 + p01[ch] * w01 + p11[ch] * w11;
                }
            }
        }
        self.push(out, Box::new(UpsampleBilinearOp { a }))
    }

    /// RGB -> single-channel luma (0.299, 0.587, 0.114).
    pub fn luma(&mut self, a: ValueId) -> Result<ValueId> {
        let (h, w, c) = self.value(a).shape();
        if c != 3 {
            return Err(PgError::shape(format!("luma expects 3 channels, got {c}")));
        }
        let src = self.value(a);
        let wr = S::lit(LUMA_R);
        let wg = S::lit(LUMA_G);
        let wb = S::lit(LUMA_B);
        let mut out = Tensor3::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let p = src.pixel(y, x);
                out.set(y, x, 0, p[0] * wr + p[1] * wg + p[2] * wb);
            }
        }
        Ok(self.push(out, Box::new(LumaOp { a })))
    }

    /// Depthwise separable blur with a fixed (non-learned) 1D kernel; valid
    /// padding, so the output shrinks by the kernel radius on each side.
    pub fn blur_valid(&mut self, a: ValueId, kernel: &[S]) -> Result<ValueId> {
        let (h, w, _) = self.value(a).shape();
        let r = kernel.len() / 2;
        if kernel.len() % 2 == 0 || kernel.is_empty() {
            return Err(PgError::arg("blur kernel length must be odd".into()));
        }
        if h < 2 * r + 1 || w < 2 * r + 1 {
            return Err(PgError::shape(format!(
                "image {h}x{w} smaller than blur window {}",
                2 * r + 1
            )));
        }
        let out = blur_valid_forward(self.value(a), kernel);
        Ok(self.push(out, Box::new(BlurValidOp { a, kernel: kernel.to_vec() })))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: S = self.value(a).data().iter().copied().sum();
        let out = Tensor3::filled(1, 1, 1, s);
        self.push(out, Box::new(SumAllOp { a, scale: 1.0 }))
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).len();
        let s: S = self.value(a).data().iter().copied().sum();
        let out = Tensor3::filled(1, 1, 1, s / S::from_usize_(n));
        self.push(out, Box::new(SumAllOp { a, scale: 1.0 / n as f64 }))
    }

    /// Per-pixel outer product of channels: (h,w,ca) x (h,w,cb) -> (h,w,ca*cb).
    pub fn outer_product(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (h, w, ca) = self.value(a).shape();
        let sb = self.value(b).shape();
        if (sb.0, sb.1) != (h, w) {
            return Err(PgError::shape(format!("outer_product spatial mismatch {sb:?}")));
        }
        let cb = sb.2;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor3::zeros(h, w, ca * cb);
        for y in 0..h {
            for x in 0..w {
                let ap = av.pixel(y, x);
                let bp = bv.pixel(y, x);
                let dst = out.pixel_mut(y, x);
                for i in 0..ca {
                    for j in 0..cb {
                        dst[i * cb + j] = ap[i] * bp[j];
                    }
                }
            }
        }
        Ok(self.push(out, Box::new(OuterProductOp { a, b })))
    }
}
