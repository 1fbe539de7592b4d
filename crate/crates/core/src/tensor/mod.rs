//! Dense tensors with recorded-graph reverse-mode differentiation.
//!
//! Every operation that sees at least one gradient-requiring input
//! records a node holding its parents and an adjoint rule. Nodes are
//! numbered in creation order, which is a valid topological order, so
//! the backward pass simply walks reachable nodes by descending id.
//! Values are immutable once created (leaf parameters may be swapped
//! wholesale through [`Tensor::set_value`]), so a backward pass never
//! perturbs forward results.

mod conv;
mod gradcheck;
mod linalg;
mod params;
mod sample;

pub use gradcheck::*;
pub use params::*;
pub use sample::*;

use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn, SliceInfoElem};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
    static CHECK_FINITE: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording any graph nodes (eval mode).
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = RECORDING.with(|c| c.replace(false));
    let out = f();
    RECORDING.with(|c| c.set(prev));
    out
}

pub fn grad_recording_enabled() -> bool {
    RECORDING.with(|c| c.get())
}

/// When enabled, every primitive asserts that its output is finite.
pub fn set_finite_checks(on: bool) {
    CHECK_FINITE.with(|c| c.set(on));
}

type BackFn = Box<dyn Fn(&ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>>>;

struct OpNode {
    parents: Vec<Tensor>,
    backward: BackFn,
}

struct Inner {
    id: u64,
    value: RefCell<Rc<ArrayD<f64>>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    op: RefCell<Option<OpNode>>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        // Iterative teardown; long op chains would overflow the stack
        // under the default recursive drop.
        let mut stack: Vec<OpNode> = self.op.borrow_mut().take().into_iter().collect();
        while let Some(op) = stack.pop() {
            for parent in op.parents {
                if let Ok(inner) = Rc::try_unwrap(parent.inner) {
                    stack.extend(inner.op.borrow_mut().take());
                }
            }
        }
    }
}

/// Dense n-dimensional array of `f64` with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, requires_grad={})", self.shape(), self.requires_grad())
    }
}

impl Tensor {
    fn new(value: ArrayD<f64>, requires_grad: bool, op: Option<OpNode>) -> Tensor {
        if CHECK_FINITE.with(|c| c.get()) && !value.iter().all(|v| v.is_finite()) {
            panic!("non-finite value produced by primitive op");
        }
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                value: RefCell::new(Rc::new(value)),
                grad: RefCell::new(None),
                requires_grad,
                op: RefCell::new(op),
            }),
        }
    }

    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, false, None)
    }

    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, true, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::Dim(e.to_string()))?,
        ))
    }

    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.inner.value.borrow().clone()
    }

    /// Replace the value of a leaf tensor (parameter updates, FD probes).
    pub fn set_value(&self, value: ArrayD<f64>) {
        assert!(
            self.inner.op.borrow().is_none(),
            "set_value is only valid on leaf tensors"
        );
        *self.inner.value.borrow_mut() = Rc::new(value);
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        let v = self.inner.value.borrow();
        assert_eq!(v.len(), 1, "item() requires a single-element tensor");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when the backward pass has to reach this tensor.
    fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.borrow().is_some()
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate
    /// into every reachable tensor with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        // Collect reachable nodes; creation ids give topological order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(op) = t.inner.op.borrow().as_ref() {
                for p in &op.parents {
                    if p.needs_grad() {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accumulate_grad(ArrayD::from_elem(IxDyn(&[]), 1.0).into_shape_with_order(IxDyn(self.shape().as_slice())).unwrap());
        for node in &order {
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(op) = node.inner.op.borrow().as_ref() {
                let needs: Vec<bool> = op.parents.iter().map(|p| p.needs_grad()).collect();
                let parent_grads = (op.backward)(&grad, &needs);
                for (p, g) in op.parents.iter().zip(parent_grads) {
                    if let Some(g) = g {
                        debug_assert_eq!(g.shape(), &p.shape()[..], "adjoint shape mismatch");
                        p.accumulate_grad(g);
                    }
                }
            }
            if !node.inner.requires_grad {
                // Interior gradients are no longer needed.
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }
}

fn record(inputs: &[&Tensor]) -> bool {
    grad_recording_enabled() && inputs.iter().any(|t| t.needs_grad())
}

/// Build an op result, recording the adjoint rule when needed.
pub(crate) fn make_op(
    inputs: &[&Tensor],
    value: ArrayD<f64>,
    backward: impl Fn(&ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>> + 'static,
) -> Tensor {
    if record(inputs) {
        Tensor::new(
            value,
            false,
            Some(OpNode {
                parents: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            }),
        )
    } else {
        Tensor::new(value, false, None)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Dim(format!(
                "incompatible broadcast: {:?} vs {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Materialize `arr` broadcast to `shape` (numpy rules).
pub(crate) fn bc_view(arr: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut s = vec![1usize; shape.len() - arr.ndim()];
    s.extend_from_slice(arr.shape());
    arr.as_standard_layout()
        .into_shape_with_order(IxDyn(&s))
        .unwrap()
        .broadcast(IxDyn(shape))
        .unwrap()
        .to_owned()
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
pub(crate) fn reduce_to(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            let summed = g.sum_axis(Axis(i));
            g = summed.insert_axis(Axis(i));
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tensor {
    pub fn neg(&self) -> Tensor {
        let v = self.value().mapv(|x| -x);
        make_op(&[self], v, |g, _| vec![Some(g.mapv(|x| -x))])
    }

    pub fn exp(&self) -> Tensor {
        let v = self.value().mapv(f64::exp);
        let y = Rc::new(v.clone());
        make_op(&[self], v, move |g, _| vec![Some(g * &*y)])
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.value().mapv(f64::tanh);
        let y = Rc::new(v.clone());
        make_op(&[self], v, move |g, _| {
            vec![Some(g * &y.mapv(|t| 1.0 - t * t))]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(sigmoid_scalar);
        let y = Rc::new(v.clone());
        make_op(&[self], v, move |g, _| {
            vec![Some(g * &y.mapv(|s| s * (1.0 - s)))]
        })
    }

    pub fn softplus(&self) -> Tensor {
        let x = self.value();
        let v = x.mapv(softplus_scalar);
        make_op(&[self], v, move |g, _| {
            vec![Some(g * &x.mapv(sigmoid_scalar))]
        })
    }

    pub fn square(&self) -> Tensor {
        let x = self.value();
        let v = x.mapv(|v| v * v);
        make_op(&[self], v, move |g, _| vec![Some(g * &x.mapv(|v| 2.0 * v))])
    }

    pub fn relu(&self) -> Tensor {
        let x = self.value();
        let v = x.mapv(|v| v.max(0.0));
        make_op(&[self], v, move |g, _| {
            vec![Some(g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| c * x);
        make_op(&[self], v, move |g, _| vec![Some(g.mapv(|x| c * x))])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x + c);
        make_op(&[self], v, |g, _| vec![Some(g.clone())])
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>, bool, bool) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>)
            + 'static,
    ) -> Result<Tensor> {
        let av = self.value();
        let bv = other.value();
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let aw = bc_view(&av, &shape);
        let bw = bc_view(&bv, &shape);
        let mut out = ArrayD::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out)
            .and(&aw)
            .and(&bw)
            .for_each(|o, &a, &b| *o = f(a, b));
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(make_op(&[self, other], out, move |g, needs| {
            let (ga, gb) = back(g, &av, &bv, needs[0], needs[1]);
            vec![
                ga.map(|g| reduce_to(&g, &ash)),
                gb.map(|g| reduce_to(&g, &bsh)),
            ]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |g, _, _, na, nb| {
            (na.then(|| g.clone()), nb.then(|| g.clone()))
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |g, _, _, na, nb| {
            (na.then(|| g.clone()), nb.then(|| g.mapv(|x| -x)))
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |g, a, b, na, nb| {
            let ga = na.then(|| g * &bc_view(b, g.shape()));
            let gb = nb.then(|| g * &bc_view(a, g.shape()));
            (ga, gb)
        })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a / b, |g, a, b, na, nb| {
            let bw = bc_view(b, g.shape()).to_owned();
            let ga = na.then(|| g / &bw);
            let gb = nb.then(|| {
                let aw = bc_view(a, g.shape());
                -(g * &aw) / &(&bw * &bw)
            });
            (ga, gb)
        })
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total = self.value().sum();
        let shape = self.shape();
        make_op(
            &[self],
            ArrayD::from_elem(IxDyn(&[]), total),
            move |g, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            },
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it as a singleton.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let v = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.shape();
        make_op(&[self], v, move |g, _| {
            vec![Some(
                g.broadcast(IxDyn(&shape)).unwrap().to_owned(),
            )]
        })
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} to {:?}",
                v.shape(),
                shape
            )));
        }
        let orig = v.shape().to_vec();
        let out = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::Dim(e.to_string()))?;
        Ok(make_op(&[self], out, move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap(),
            )]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self.value();
        let out = v
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        make_op(&[self], out, move |g, _| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned(),
            )]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value();
        let out = bc_view(&v, shape).to_owned();
        let orig = v.shape().to_vec();
        Ok(make_op(&[self], out, move |g, _| {
            vec![Some(reduce_to(g, &orig))]
        }))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self.value();
        let info: Vec<SliceInfoElem> = (0..v.ndim())
            .map(|i| {
                if i == axis {
                    SliceInfoElem::from(start as isize..(start + len) as isize)
                } else {
                    SliceInfoElem::from(..)
                }
            })
            .collect();
        let out = v.slice(info.as_slice()).to_owned();
        let orig = v.shape().to_vec();
        make_op(&[self], out, move |g, _| {
            let mut full = ArrayD::zeros(IxDyn(&orig));
            let info: Vec<SliceInfoElem> = (0..orig.len())
                .map(|i| {
                    if i == axis {
                        SliceInfoElem::from(start as isize..(start + len) as isize)
                    } else {
                        SliceInfoElem::from(..)
                    }
                })
                .collect();
            full.slice_mut(info.as_slice()).assign(g);
            vec![Some(full)]
        })
    }

    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        let values: Vec<_> = parts.iter().map(|t| t.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        // concatenate can return a non-standard layout; normalize so
        // downstream reshapes of this value never fail.
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::Dim(e.to_string()))?
            .as_standard_layout()
            .to_owned();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(make_op(&refs, out, move |g, needs| {
            let mut offset = 0usize;
            extents
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| {
                        let info: Vec<SliceInfoElem> = (0..g.ndim())
                            .map(|i| {
                                if i == axis {
                                    SliceInfoElem::from(start as isize..(start + len) as isize)
                                } else {
                                    SliceInfoElem::from(..)
                                }
                            })
                            .collect();
                        g.slice(info.as_slice()).to_owned()
                    })
                })
                .collect()
        }))
    }

    /// Gather rows (axis 0) by index; embedding lookup.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let v = self.value();
        let rows: Vec<_> = indices
            .iter()
            .map(|&i| v.index_axis(Axis(0), i))
            .collect();
        let out = ndarray::stack(Axis(0), &rows).unwrap();
        let orig = v.shape().to_vec();
        let idx = indices.to_vec();
        make_op(&[self], out, move |g, _| {
            let mut full = ArrayD::zeros(IxDyn(&orig));
            for (pos, &row) in idx.iter().enumerate() {
                let gi = g.index_axis(Axis(0), pos);
                let mut slot = full.index_axis_mut(Axis(0), row);
                slot += &gi;
            }
            vec![Some(full)]
        })
    }

    /// For a 2-D tensor, pick one column per row: out[i] = x[i, idx[i]].
    pub fn gather_index(&self, indices: &[usize]) -> Result<Tensor> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::Dim("gather_index needs a 2-D tensor".into()));
        }
        let (m, k) = (v.shape()[0], v.shape()[1]);
        if indices.len() != m || indices.iter().any(|&i| i >= k) {
            return Err(Error::Dim("gather_index indices out of range".into()));
        }
        let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| v[[i, j]]).collect();
        let idx = indices.to_vec();
        Ok(make_op(
            &[self],
            ArrayD::from_shape_vec(IxDyn(&[m]), out).unwrap(),
            move |g, _| {
                let mut full = ArrayD::zeros(IxDyn(&[m, k]));
                for (i, &j) in idx.iter().enumerate() {
                    full[[i, j]] = g[[i]];
                }
                vec![Some(full)]
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / dropout
// ---------------------------------------------------------------------------

impl Tensor {
    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&self) -> Tensor {
        let v = self.value();
        let axis = v.ndim() - 1;
        let mut out = v.as_ref().clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x /= sum;
            }
        }
        let y = Rc::new(out.clone());
        make_op(&[self], out, move |g, _| {
            let gy = g * &*y;
            let dot = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let dotb = dot.broadcast(g.raw_dim()).unwrap().to_owned();
            vec![Some(&gy - &(&*y * &dotb))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Tensor {
        let v = self.value();
        let axis = v.ndim() - 1;
        let mut out = v.as_ref().clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for x in lane.iter_mut() {
                *x -= lse;
            }
        }
        let y = Rc::new(out.clone());
        make_op(&[self], out, move |g, _| {
            let p = y.mapv(f64::exp);
            let gsum = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let gsumb = gsum.broadcast(g.raw_dim()).unwrap().to_owned();
            vec![Some(g - &(&p * &gsumb))]
        })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let v = self.value();
        let axis = v.ndim() - 1;
        let d = v.shape()[axis] as f64;
        let mut xhat = v.as_ref().clone();
        let mut inv_std = Vec::with_capacity(v.len() / v.shape()[axis]);
        for mut lane in xhat.lanes_mut(Axis(axis)) {
            let mean = lane.sum() / d;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for x in lane.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let gv = gain.value();
        let bv = bias.value();
        let out = &(&xhat * &bc_view(&gv, xhat.shape())) + &bc_view(&bv, xhat.shape());
        let xhat = Rc::new(xhat);
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        make_op(&[self, gain, bias], out, move |g, needs| {
            let dgain = needs[1].then(|| reduce_to(&(g * &*xhat), &gshape));
            let dbias = needs[2].then(|| reduce_to(g, &bshape));
            let dx = needs[0].then(|| {
                let dxhat = g * &bc_view(&gv, g.shape());
                let m1 = dxhat.sum_axis(Axis(axis)).insert_axis(Axis(axis)) / d;
                let m2 = (&dxhat * xhat.as_ref()).sum_axis(Axis(axis)).insert_axis(Axis(axis)) / d;
                let m1b = m1.broadcast(g.raw_dim()).unwrap().to_owned();
                let m2b = m2.broadcast(g.raw_dim()).unwrap().to_owned();
                let mut dx = &dxhat - &m1b - &(xhat.as_ref() * &m2b);
                // scale each lane by its inverse std
                let mut k = 0usize;
                for mut lane in dx.lanes_mut(Axis(axis)) {
                    let inv = inv_std[k];
                    k += 1;
                    for x in lane.iter_mut() {
                        *x *= inv;
                    }
                }
                dx
            });
            vec![dx, dgain, dbias]
        })
    }

    /// Inverted dropout with keep-probability `1 - p`; identity at p = 0.
    pub fn dropout(&self, p: f64, rng: &mut impl rand::Rng) -> Tensor {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let v = self.value();
        let mask = ArrayD::from_shape_fn(v.raw_dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = v.as_ref() * &mask;
        make_op(&[self], out, move |g, _| vec![Some(g * &mask)])
    }
}
