//! Reverse-mode automatic differentiation over [`Tensor3`] values.
//!
//! A [`Tape`] records every differentiable operation of a forward pass in
//! execution order; node `i` produces value `i`, so the record is
//! topologically sorted by construction. [`Tape::backward`] replays the
//! record once in reverse, accumulating gradients into upstream values and
//! into the [`ParamStore`]. Parameter gradients accumulate across calls;
//! the caller zeroes them explicitly.

mod conv;
mod ops_basic;
mod ops_geom;
mod raster;

pub use conv::{conv2d_forward, ConvSpec};
pub use ops_geom::{LookupGeom, WarpGeom};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{PgError, Result};
use crate::scalar::{rel_err, Real};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

/// Shape metadata for one parameter buffer. Convolution weights use all four
/// fields; biases and vectors set the spatial/input fields to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(n: usize) -> Self {
        ParamShape { kh: 1, kw: 1, cin: 1, cout: n }
    }
}

/// One named parameter buffer with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamBuf<S> {
    pub name: String,
    pub shape: ParamShape,
    pub data: Vec<S>,
    pub grad: Vec<S>,
}

/// Deterministic initialization scheme for a parameter buffer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)].
    FanInUniform,
    Zeros,
    Const(f64),
}

/// Ordered collection of all learnable parameters. Creation order is the
/// canonical order used by checkpoints and the optimizer.
pub struct ParamStore<S> {
    bufs: Vec<ParamBuf<S>>,
    rng: ChaCha12Rng,
}

impl<S: Real> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore { bufs: Vec::new(), rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn add(&mut self, name: &str, shape: ParamShape, init: Init) -> ParamId {
        let n = shape.len();
        let fan_in = shape.kh * shape.kw * shape.cin;
        let data: Vec<S> = match init {
            Init::FanInUniform => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| S::lit(self.rng.gen_range(-bound..bound))).collect()
            }
            Init::Zeros => vec![S::zero(); n],
            Init::Const(v) => vec![S::lit(v); n],
        };
        self.bufs.push(ParamBuf { name: name.to_string(), shape, data, grad: vec![S::zero(); n] });
        ParamId(self.bufs.len() as u32 - 1)
    }

    pub fn buf(&self, id: ParamId) -> &ParamBuf<S> {
        &self.bufs[id.0 as usize]
    }

    pub fn buf_mut(&mut self, id: ParamId) -> &mut ParamBuf<S> {
        &mut self.bufs[id.0 as usize]
    }

    /// Simultaneous read access to data and write access to the gradient.
    pub fn parts_mut(&mut self, id: ParamId) -> (&[S], &mut [S]) {
        let b = &mut self.bufs[id.0 as usize];
        (&b.data, &mut b.grad)
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamBuf<S>)> {
        self.bufs.iter().enumerate().map(|(i, b)| (ParamId(i as u32), b))
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.bufs {
            b.grad.fill(S::zero());
        }
    }

    pub fn total_len(&self) -> usize {
        self.bufs.iter().map(|b| b.data.len()).sum()
    }

    pub fn set_all(&mut self, id: ParamId, v: S) {
        self.buf_mut(id).data.fill(v);
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            bufs: self
                .bufs
                .iter()
                .map(|b| ParamBuf {
                    name: b.name.clone(),
                    shape: b.shape,
                    data: b.data.iter().map(|v| T::lit(v.to_f64x())).collect(),
                    grad: vec![T::zero(); b.grad.len()],
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

/// Gradient-propagation context handed to each node during the reverse pass.
pub struct BackwardCtx<'a, S> {
    vals: &'a [Tensor3<S>],
    pending: &'a mut [Option<Tensor3<S>>],
    params: &'a mut ParamStore<S>,
}

impl<'a, S: Real> BackwardCtx<'a, S> {
    pub fn val(&self, id: ValueId) -> &Tensor3<S> {
        &self.vals[id.0 as usize]
    }

    /// Accumulate a gradient tensor into an upstream value.
    pub fn add_grad(&mut self, id: ValueId, g: Tensor3<S>) {
        let slot = &mut self.pending[id.0 as usize];
        match slot {
            Some(acc) => {
                debug_assert!(acc.same_shape(&g));
                for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                    *a += *b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Zero-initialized gradient accumulator for an upstream value.
    pub fn grad_mut(&mut self, id: ValueId) -> &mut Tensor3<S> {
        let shape = self.vals[id.0 as usize].shape();
        self.pending[id.0 as usize]
            .get_or_insert_with(|| Tensor3::zeros(shape.0, shape.1, shape.2))
    }

    pub fn param_parts(&mut self, id: ParamId) -> (&[S], &mut [S]) {
        self.params.parts_mut(id)
    }

    pub fn param_data(&self, id: ParamId) -> &[S] {
        &self.params.buf(id).data
    }
}

/// A recorded operation: how to push the output gradient upstream.
pub(crate) trait NodeOp<S: Real>: Send + Sync {
    fn backward(&self, out_val: &Tensor3<S>, out_grad: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>);
    fn name(&self) -> &'static str;
}

/// Leaf node: an input or constant. Gradients may flow into it (readable
/// after backward) but nothing propagates further.
struct LeafOp;

impl<S: Real> NodeOp<S> for LeafOp {
    fn backward(&self, _: &Tensor3<S>, _: &Tensor3<S>, _: &mut BackwardCtx<'_, S>) {}
    fn name(&self) -> &'static str {
        "leaf"
    }
}

/// Node materializing a parameter buffer as a value of the given shape.
struct ParamTensorOp {
    id: ParamId,
}

impl<S: Real> NodeOp<S> for ParamTensorOp {
    fn backward(&self, _out: &Tensor3<S>, g: &Tensor3<S>, ctx: &mut BackwardCtx<'_, S>) {
        let (_, grad) = ctx.param_parts(self.id);
        for (pg, gv) in grad.iter_mut().zip(g.data().iter()) {
            *pg += *gv;
        }
    }
    fn name(&self) -> &'static str {
        "param_tensor"
    }
}

/// Execution record of one forward pass.
pub struct Tape<S> {
    vals: Vec<Tensor3<S>>,
    ops: Vec<Box<dyn NodeOp<S>>>,
    grads: Vec<Option<Tensor3<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor3<S> {
        &self.vals[id.0 as usize]
    }

    /// Scalar payload of a 1x1x1 value.
    pub fn scalar(&self, id: ValueId) -> S {
        debug_assert_eq!(self.value(id).shape(), (1, 1, 1));
        self.value(id).data()[0]
    }

    /// Gradient of a value after [`Tape::backward`]; `None` if no gradient
    /// reached it.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor3<S>> {
        self.grads.get(id.0 as usize).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, val: Tensor3<S>, op: Box<dyn NodeOp<S>>) -> ValueId {
        self.vals.push(val);
        self.ops.push(op);
        ValueId(self.vals.len() as u32 - 1)
    }

    /// Record an input/constant leaf.
    pub fn input(&mut self, t: Tensor3<S>) -> ValueId {
        self.push(t, Box::new(LeafOp))
    }

    /// Materialize a parameter buffer as a value shaped (h, w, c).
    pub fn param_tensor(&mut self, store: &ParamStore<S>, id: ParamId, h: usize, w: usize, c: usize) -> Result<ValueId> {
        let buf = store.buf(id);
        if buf.data.len() != h * w * c {
            return Err(PgError::shape(format!(
                "param {} has {} elements, requested {}x{}x{}",
                buf.name,
                buf.data.len(),
                h,
                w,
                c
            )));
        }
        let t = Tensor3::from_vec(h, w, c, buf.data.clone())?;
        Ok(self.push(t, Box::new(ParamTensorOp { id })))
    }

    /// Reverse pass from a scalar terminal node. Accumulates parameter
    /// gradients into `params`; per-value gradients become readable through
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId, params: &mut ParamStore<S>) -> Result<()> {
        if self.value(loss).shape() != (1, 1, 1) {
            return Err(PgError::arg(format!(
                "backward requires a scalar terminal node, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.vals.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0 as usize] = Some(Tensor3::filled(1, 1, 1, S::one()));
        for i in (0..n).rev() {
            // The producing node runs only after all consumers have
            // accumulated into grads[i], so the gradient is final here.
            let Some(g) = self.grads[i].take() else { continue };
            let (done, rest) = self.grads.split_at_mut(i);
            let _ = rest;
            let mut ctx = BackwardCtx { vals: &self.vals, pending: done, params };
            self.ops[i].backward(&self.vals[i], &g, &mut ctx);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Numeric-vs-analytic comparison for a scalar function of a flat input,
/// using central differences. Returns the max relative error under the
/// crate-wide floor rule. Fails on non-finite forward output.
pub fn grad_check_fn<S: Real>(
    f: impl Fn(&[S]) -> S,
    inputs: &[S],
    analytic: &[S],
    eps: S,
) -> Result<f64> {
    if !f(inputs).is_finite() {
        return Err(PgError::NonFinite("grad_check forward".into()));
    }
    let mut x = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(PgError::NonFinite("grad_check perturbed forward".into()));
        }
        let numeric = (fp - fm) / (eps + eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of parameter gradients through an arbitrary
/// tape-built scalar loss. `build` must be deterministic.
pub fn grad_check_params<S: Real>(
    build: &dyn Fn(&mut Tape<S>, &ParamStore<S>) -> Result<ValueId>,
    params: &mut ParamStore<S>,
    ids: &[ParamId],
    eps: S,
) -> Result<f64> {
    // Analytic pass.
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(PgError::NonFinite("grad_check_params forward".into()));
    }
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<S>> = ids.iter().map(|&id| params.buf(id).grad.clone()).collect();

    let eval = |params: &ParamStore<S>| -> Result<S> {
        let mut t = Tape::new();
        let l = build(&mut t, params)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(PgError::NonFinite("grad_check_params perturbed forward".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..params.buf(id).data.len() {
            let orig = params.buf(id).data[i];
            params.buf_mut(id).data[i] = orig + eps;
            let fp = eval(params)?;
            params.buf_mut(id).data[i] = orig - eps;
            let fm = eval(params)?;
            params.buf_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (eps + eps);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of gradients w.r.t. leaf input tensors.
/// `build` receives one leaf per entry of `inputs`, in order.
pub fn grad_check_inputs<S: Real>(
    build: &dyn Fn(&mut Tape<S>, &[ValueId]) -> Result<ValueId>,
    inputs: &mut [Tensor3<S>],
    eps: S,
) -> Result<f64> {
    let run = |inputs: &[Tensor3<S>], want_grads: bool| -> Result<(S, Vec<Option<Tensor3<S>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(PgError::NonFinite("grad_check_inputs forward".into()));
        }
        if want_grads {
            let mut dummy = ParamStore::new(0);
            tape.backward(loss, &mut dummy)?;
            let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
            Ok((v, grads))
        } else {
            Ok((v, Vec::new()))
        }
    };

    let (_, analytic) = run(inputs, true)?;
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let (fp, _) = run(inputs, false)?;
            inputs[k].data_mut()[i] = orig - eps;
            let (fm, _) = run(inputs, false)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (eps + eps);
            let a = analytic[k].as_ref().map_or(S::zero(), |g| g.data()[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_fn_quadratic() {
        // f(x) = x^2 at x = 3: analytic 6.
        let err = grad_check_fn(|x: &[f64]| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn grad_check_fn_constant_is_exact_zero() {
        let err = grad_check_fn(|_: &[f64]| 7.0, &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_fn_rejects_nonfinite() {
        assert!(grad_check_fn(|_: &[f64]| f64::NAN, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn backward_requires_scalar_terminal() {
        let mut tape = Tape::<f64>::new();
        let v = tape.input(Tensor3::zeros(2, 2, 1));
        let mut params = ParamStore::new(0);
        assert!(tape.backward(v, &mut params).is_err());
    }

    #[test]
    fn linear_loss_grad_is_input_exactly() {
        // loss = sum(w * x) with fixed x => grad(w) = x.
        let x = Tensor3::<f64>::from_fn(2, 3, 1, |y, xx, _| (y * 3 + xx) as f64 - 2.5);
        let mut params = ParamStore::new(1);
        let w = params.add("w", ParamShape::vector(6), Init::FanInUniform);
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let wid = tape.param_tensor(&params, w, 2, 3, 1).unwrap();
        let prod = tape.mul(wid, xid).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.buf(w).grad, x.data().to_vec());
    }

    #[test]
    fn untouched_param_gets_exactly_zero() {
        let mut params = ParamStore::<f64>::new(2);
        let w = params.add("w", ParamShape::vector(4), Init::FanInUniform);
        let unused = params.add("unused", ParamShape::vector(3), Init::FanInUniform);
        let mut tape = Tape::new();
        let wid = tape.param_tensor(&params, w, 1, 1, 4).unwrap();
        let loss = tape.sum_all(wid);
        tape.backward(loss, &mut params).unwrap();
        assert!(params.buf(unused).grad.iter().all(|&g| g == 0.0));
        assert!(params.buf(w).grad.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn param_init_is_deterministic_per_seed() {
        let mut a = ParamStore::<f32>::new(42);
        let mut b = ParamStore::<f32>::new(42);
        let ia = a.add("w", ParamShape { kh: 3, kw: 3, cin: 4, cout: 8 }, Init::FanInUniform);
        let ib = b.add("w", ParamShape { kh: 3, kw: 3, cin: 4, cout: 8 }, Init::FanInUniform);
        assert_eq!(a.buf(ia).data, b.buf(ib).data);
        let mut c = ParamStore::<f32>::new(43);
        let ic = c.add("w", ParamShape { kh: 3, kw: 3, cin: 4, cout: 8 }, Init::FanInUniform);
        assert_ne!(a.buf(ia).data, c.buf(ic).data);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut params = ParamStore::<f64>::new(3);
        let w = params.add("w", ParamShape::vector(2), Init::Const(1.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let wid = tape.param_tensor(&params, w, 1, 1, 2).unwrap();
            let loss = tape.sum_all(wid);
            tape.backward(loss, &mut params).unwrap();
        }
        assert!(params.buf(w).grad.iter().all(|&g| g == 2.0));
        params.zero_grads();
        assert!(params.buf(w).grad.iter().all(|&g| g == 0.0));
    }
}
