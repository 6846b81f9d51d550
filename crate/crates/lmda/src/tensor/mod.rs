//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The tape records one backward closure per forward operation and replays
//! them in exact reverse order. A fresh tape is built for every forward
//! pass; tensors are cheap handles (`Rc`) into shared storage.

mod conv;
mod norm;

pub use norm::{BatchNormState, BN_EPS, BN_MOMENTUM};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("{op}: expected a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArg { op, detail: detail.into() }
}

struct Storage {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Handle to a dense row-major f64 array, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Storage>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &s.shape)
            .field("requires_grad", &s.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Storage { shape, data, grad: None, requires_grad: false })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![v])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |s| s.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        let s = self.inner.borrow();
        assert_eq!(s.data.len(), 1, "item() on non-scalar tensor");
        s.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place (same length required).
    pub fn set_data(&self, data: &[f64]) {
        let mut s = self.inner.borrow_mut();
        assert_eq!(s.data.len(), data.len(), "set_data length mismatch");
        s.data.copy_from_slice(data);
    }

    /// In-place update used by optimizers: `data[i] += f(i)` style edits.
    pub fn update_data(&self, f: impl FnMut(usize, &mut f64)) {
        let mut s = self.inner.borrow_mut();
        let mut f = f;
        for (i, v) in s.data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

/// Adds `delta` into the tensor's gradient buffer, allocating it on first use.
pub(crate) fn accumulate(t: &Tensor, delta: &[f64]) {
    let mut s = t.inner.borrow_mut();
    let n = s.data.len();
    let g = s.grad.get_or_insert_with(|| vec![0.0; n]);
    for (gi, di) in g.iter_mut().zip(delta) {
        *gi += *di;
    }
}

/// Clones the output gradient, or `None` when no gradient reached this node.
pub(crate) fn out_grad(t: &Tensor) -> Option<Vec<f64>> {
    t.inner.borrow().grad.clone()
}

type BackwardFn = Box<dyn Fn()>;

/// Records forward operations and replays their adjoints in reverse order.
///
/// A tape is confined to a single thread of execution and is meant to be
/// rebuilt for every forward pass. Calling [`Tape::backward`] repeatedly
/// without clearing gradients accumulates them.
#[derive(Default)]
pub struct Tape {
    ops: RefCell<Vec<BackwardFn>>,
    outputs: RefCell<Vec<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    pub(crate) fn record(&self, f: impl Fn() + 'static) {
        self.ops.borrow_mut().push(Box::new(f));
    }

    /// Marks `out` as gradient-carrying and records the closure when any
    /// input participates in differentiation.
    pub(crate) fn record_if(&self, inputs: &[&Tensor], out: &Tensor, f: impl Fn() + 'static) {
        if inputs.iter().any(|t| t.requires_grad()) {
            out.set_requires_grad(true);
            self.outputs.borrow_mut().push(out.clone());
            self.record(f);
        }
    }

    /// Seeds `loss` with gradient 1 and replays all recorded adjoints.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// cleared first so each replay contributes exactly one pass.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar { op: "backward", shape: loss.shape() });
        }
        for out in self.outputs.borrow().iter() {
            out.zero_grad();
        }
        accumulate(loss, &[1.0]);
        for op in self.ops.borrow().iter().rev() {
            op();
        }
        Ok(())
    }
}

// ── elementwise ──────────────────────────────────────────────────────

impl Tape {
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::raw(a.shape(), data);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(&[a, b], &out, move || {
            if let Some(g) = out_grad(&o2) {
                if a2.requires_grad() {
                    accumulate(&a2, &g);
                }
                if b2.requires_grad() {
                    accumulate(&b2, &g);
                }
            }
        });
        Ok(out)
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err("hadamard", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::raw(a.shape(), data);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(&[a, b], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            if a2.requires_grad() {
                let da: Vec<f64> = g.iter().zip(b2.data().iter()).map(|(gi, bi)| gi * bi).collect();
                accumulate(&a2, &da);
            }
            if b2.requires_grad() {
                // Aliased inputs (x ⊙ x) are handled naturally: each factor
                // accumulates g·x, totalling 2·g·x.
                let db: Vec<f64> =
                    g.iter().zip(a2.data().iter()).map(|(gi, ai)| gi * ai).collect();
                accumulate(&b2, &db);
            }
        });
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * c).collect();
        let out = Tensor::raw(x.shape(), data);
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            if let Some(g) = out_grad(&o2) {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                accumulate(&x2, &dx);
            }
        });
        out
    }

    /// Gaussian error linear unit: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::raw(x.shape(), data);
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            if let Some(g) = out_grad(&o2) {
                let dx: Vec<f64> =
                    g.iter().zip(x2.data().iter()).map(|(gi, &v)| gi * gelu_grad_scalar(v)).collect();
                accumulate(&x2, &dx);
            }
        });
        out
    }

    /// Elementwise multiply by a fixed mask (dropout support). The mask is
    /// treated as a constant.
    pub fn apply_mask(&self, x: &Tensor, mask: Vec<f64>) -> Result<Tensor, TensorError> {
        if mask.len() != x.len() {
            return Err(shape_err("apply_mask", format!("mask length {} vs {}", mask.len(), x.len())));
        }
        let data = x.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let out = Tensor::raw(x.shape(), data);
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            if let Some(g) = out_grad(&o2) {
                let dx: Vec<f64> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                accumulate(&x2, &dx);
            }
        });
        Ok(out)
    }

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::scalar(s);
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            if let Some(g) = out_grad(&o2) {
                accumulate(&x2, &vec![g[0]; x2.len()]);
            }
        });
        out
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// ── axis helpers ─────────────────────────────────────────────────────

/// Splits a shape around `axis` into (outer, n, inner) extents so that a
/// flat index decomposes as `(o·n + i)·inner + j`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl Tape {
    /// Numerically stable softmax along `axis`; every slice sums to 1.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(arg_err("softmax", format!("axis {} out of range for rank {}", axis, shape.len())));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = x.to_vec();
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..n {
                    mx = mx.max(xd[idx(i)]);
                }
                let mut z = 0.0;
                for i in 0..n {
                    let e = (xd[idx(i)] - mx).exp();
                    data[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    data[idx(i)] /= z;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let s = o2.to_vec();
            let mut dx = vec![0.0; s.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += g[idx(i)] * s[idx(i)];
                    }
                    for i in 0..n {
                        dx[idx(i)] = s[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            accumulate(&x2, &dx);
        });
        Ok(out)
    }

    /// Mean along `axis`. With `keepdim` the reduced axis stays as extent 1.
    pub fn mean_axis(&self, x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(arg_err("mean_axis", format!("axis {} out of range for rank {}", axis, shape.len())));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = x.to_vec();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                let row = &xd[base..base + inner];
                let acc = &mut data[o * inner..(o + 1) * inner];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        for v in data.iter_mut() {
            *v *= inv;
        }
        let mut out_shape: Vec<usize> = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let out = Tensor::new(&out_shape, data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let mut dx = vec![0.0; x2.len()];
            for o in 0..outer {
                for i in 0..n {
                    let base = (o * n + i) * inner;
                    for j in 0..inner {
                        dx[base + j] = g[o * inner + j] * inv;
                    }
                }
            }
            accumulate(&x2, &dx);
        });
        Ok(out)
    }

    /// Logical permutation of two axes, materialized as a copy.
    pub fn transpose_axes(&self, x: &Tensor, a: usize, b: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        let rank = shape.len();
        if a >= rank || b >= rank {
            return Err(arg_err("transpose_axes", format!("axes ({a},{b}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        let out_data = permute_copy(&x.data(), &shape, &perm);
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let out = Tensor::new(&out_shape, out_data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            // The inverse of a swap is the same swap.
            let dx = permute_copy(&g, &o2.shape(), &perm);
            accumulate(&x2, &dx);
        });
        Ok(out)
    }

    /// Row-major reshape (copy with identity backward).
    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = new_shape.iter().product();
        if n != x.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", x.shape(), new_shape)));
        }
        let out = Tensor::new(new_shape, x.to_vec())?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            if let Some(g) = out_grad(&o2) {
                accumulate(&x2, &g);
            }
        });
        Ok(out)
    }

    /// Replicates a `[B,1,C,T]` tensor to depth `d`.
    pub fn repeat_depth(&self, x: &Tensor, d: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(shape_err("repeat_depth", format!("expected [B,1,C,T], got {:?}", shape)));
        }
        let (b, _, c, t) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = c * t;
        let xd = x.to_vec();
        let mut data = vec![0.0; b * d * plane];
        for bi in 0..b {
            let src = &xd[bi * plane..(bi + 1) * plane];
            for di in 0..d {
                data[(bi * d + di) * plane..(bi * d + di + 1) * plane].copy_from_slice(src);
            }
        }
        let out = Tensor::new(&[b, d, c, t], data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let mut dx = vec![0.0; b * plane];
            for bi in 0..b {
                for di in 0..d {
                    let src = &g[(bi * d + di) * plane..(bi * d + di + 1) * plane];
                    let acc = &mut dx[bi * plane..(bi + 1) * plane];
                    for (a, v) in acc.iter_mut().zip(src) {
                        *a += *v;
                    }
                }
            }
            accumulate(&x2, &dx);
        });
        Ok(out)
    }

    /// Pads axis 2 of `x[B,D,H,W]` by `p` rows on each side, replicating
    /// the edge rows.
    pub fn replicate_pad_rows(&self, x: &Tensor, p: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(shape_err("replicate_pad_rows", format!("expected rank 4, got {:?}", shape)));
        }
        if p == 0 {
            return Ok(x.clone());
        }
        let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hp = h + 2 * p;
        let xd = x.to_vec();
        let mut data = vec![0.0; b * d * hp * w];
        let clamp = move |r: usize| -> usize { r.saturating_sub(p).min(h - 1) };
        for plane in 0..b * d {
            for r in 0..hp {
                let src = &xd[(plane * h + clamp(r)) * w..(plane * h + clamp(r) + 1) * w];
                data[(plane * hp + r) * w..(plane * hp + r + 1) * w].copy_from_slice(src);
            }
        }
        let out = Tensor::new(&[b, d, hp, w], data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let mut dx = vec![0.0; b * d * h * w];
            for plane in 0..b * d {
                for r in 0..hp {
                    let dst = &mut dx[(plane * h + clamp(r)) * w..(plane * h + clamp(r) + 1) * w];
                    for (a, v) in dst.iter_mut().zip(&g[(plane * hp + r) * w..(plane * hp + r + 1) * w]) {
                        *a += *v;
                    }
                }
            }
            accumulate(&x2, &dx);
        });
        Ok(out)
    }

    /// `out[b,d,c,t] = f[b,d,c,t] · m[b,d,0,t]` — broadcast along the
    /// spatial axis.
    pub fn broadcast_mul_spatial(&self, f: &Tensor, m: &Tensor) -> Result<Tensor, TensorError> {
        let fs = f.shape();
        let ms = m.shape();
        if fs.len() != 4 || ms.len() != 4 || ms[2] != 1 || fs[0] != ms[0] || fs[1] != ms[1] || fs[3] != ms[3] {
            return Err(shape_err("broadcast_mul_spatial", format!("{:?} vs {:?}", fs, ms)));
        }
        let (b, d, c, t) = (fs[0], fs[1], fs[2], fs[3]);
        let fd = f.to_vec();
        let md = m.to_vec();
        let mut data = vec![0.0; fd.len()];
        for bi in 0..b {
            for di in 0..d {
                let mrow = &md[(bi * d + di) * t..(bi * d + di + 1) * t];
                for ci in 0..c {
                    let base = ((bi * d + di) * c + ci) * t;
                    for ti in 0..t {
                        data[base + ti] = fd[base + ti] * mrow[ti];
                    }
                }
            }
        }
        let out = Tensor::new(&fs, data)?;
        let (f2, m2, o2) = (f.clone(), m.clone(), out.clone());
        self.record_if(&[f, m], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let fd = f2.to_vec();
            let md = m2.to_vec();
            if f2.requires_grad() {
                let mut df = vec![0.0; fd.len()];
                for bi in 0..b {
                    for di in 0..d {
                        let mrow = &md[(bi * d + di) * t..(bi * d + di + 1) * t];
                        for ci in 0..c {
                            let base = ((bi * d + di) * c + ci) * t;
                            for ti in 0..t {
                                df[base + ti] = g[base + ti] * mrow[ti];
                            }
                        }
                    }
                }
                accumulate(&f2, &df);
            }
            if m2.requires_grad() {
                let mut dm = vec![0.0; md.len()];
                for bi in 0..b {
                    for di in 0..d {
                        let mbase = (bi * d + di) * t;
                        for ci in 0..c {
                            let base = ((bi * d + di) * c + ci) * t;
                            for ti in 0..t {
                                dm[mbase + ti] += g[base + ti] * fd[base + ti];
                            }
                        }
                    }
                }
                accumulate(&m2, &dm);
            }
        });
        Ok(out)
    }

    /// Non-overlapping average pooling over the last axis of a 4-D tensor;
    /// trailing remainder samples are discarded.
    pub fn avg_pool_time(&self, x: &Tensor, k: usize) -> Result<Tensor, TensorError> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(shape_err("avg_pool_time", format!("expected rank 4, got {:?}", shape)));
        }
        let t = shape[3];
        if k == 0 || k > t {
            return Err(arg_err("avg_pool_time", format!("kernel {} vs time extent {}", k, t)));
        }
        let tp = t / k;
        let rows: usize = shape[0] * shape[1] * shape[2];
        let xd = x.to_vec();
        let mut data = vec![0.0; rows * tp];
        let inv = 1.0 / k as f64;
        for r in 0..rows {
            let row = &xd[r * t..(r + 1) * t];
            for m in 0..tp {
                let s: f64 = row[m * k..(m + 1) * k].iter().sum();
                data[r * tp + m] = s * inv;
            }
        }
        let out = Tensor::new(&[shape[0], shape[1], shape[2], tp], data)?;
        let (x2, o2) = (x.clone(), out.clone());
        self.record_if(&[x], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let mut dx = vec![0.0; rows * t];
            for r in 0..rows {
                for m in 0..tp {
                    let gv = g[r * tp + m] * inv;
                    for j in 0..k {
                        dx[r * t + m * k + j] = gv;
                    }
                }
            }
            accumulate(&x2, &dx);
        });
        Ok(out)
    }
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    for item in out.iter_mut().take(n) {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * strides[p]).sum();
        *item = data[src];
        // odometer increment over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ── linear algebra ───────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let alpha = a[i * k + l];
            if alpha == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += alpha * bv;
            }
        }
    }
    out
}

/// a [m,k] · bᵀ where b is [n,k]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ · b where a is [k,m], b is [k,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let alpha = arow[i];
            if alpha == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += alpha * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(&[m, n], matmul_raw(&a.data(), &b.data(), m, k, n))?;
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        self.record_if(&[a, b], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            if a2.requires_grad() {
                accumulate(&a2, &matmul_nt(&g, &b2.data(), m, n, k));
            }
            if b2.requires_grad() {
                accumulate(&b2, &matmul_tn(&a2.data(), &g, k, m, n));
            }
        });
        Ok(out)
    }

    /// Fully connected layer: `x[B,I] · wᵀ[I,O] + b[O]`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let sx = x.shape();
        let sw = w.shape();
        let sbias = b.shape();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sbias != vec![sw[0]] {
            return Err(shape_err("linear", format!("x {:?}, w {:?}, b {:?}", sx, sw, sbias)));
        }
        let (batch, i, o) = (sx[0], sx[1], sw[0]);
        let mut data = matmul_nt(&x.data(), &w.data(), batch, i, o);
        {
            let bd = b.data();
            for r in 0..batch {
                for (v, bias) in data[r * o..(r + 1) * o].iter_mut().zip(bd.iter()) {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new(&[batch, o], data)?;
        let (x2, w2, b2, o2) = (x.clone(), w.clone(), b.clone(), out.clone());
        self.record_if(&[x, w, b], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            if x2.requires_grad() {
                accumulate(&x2, &matmul_raw(&g, &w2.data(), batch, o, i));
            }
            if w2.requires_grad() {
                accumulate(&w2, &matmul_tn(&g, &x2.data(), o, batch, i));
            }
            if b2.requires_grad() {
                let mut db = vec![0.0; o];
                for r in 0..batch {
                    for (d, gv) in db.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                        *d += gv;
                    }
                }
                accumulate(&b2, &db);
            }
        });
        Ok(out)
    }
}

/// Forward-only central finite differences, used as the independent oracle
/// for gradient checks. `f` must be a pure function of the flat input.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests;
