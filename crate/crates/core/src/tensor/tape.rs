//! Reverse-mode differentiation over a grow-only tape.
//!
//! A [`Var`] pairs a forward [`Tensor`] value with a node on a [`Tape`].
//! Every operation computes its value eagerly and, when the tape is
//! recording, pushes a closure that routes upstream gradients to its
//! inputs. [`Tape::backward`] walks the nodes in reverse; a node used by
//! several consumers receives the sum of their contributions.

use std::cell::RefCell;

use super::{ops, Result, Tensor, TensorError};
use crate::scalar::Scalar;

type BackFn<S> = Box<dyn Fn(&Tensor<S>, &mut [Option<Tensor<S>>])>;

struct Node<S: Scalar> {
    back: Option<BackFn<S>>,
}

const DETACHED: usize = usize::MAX;

/// Operation record for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// A recording tape for training or gradient checks.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A non-recording tape: same ops, no backward graph.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, back: Option<BackFn<S>>) -> usize {
        if !self.recording {
            return DETACHED;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { back });
        nodes.len() - 1
    }

    fn record(&self, build: impl FnOnce() -> BackFn<S>) -> usize {
        if !self.recording {
            return DETACHED;
        }
        self.push(Some(build()))
    }

    /// A differentiable input node.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(None);
        Var { tape: self, id, value }
    }

    /// A node that receives no gradient (frozen data such as targets or
    /// running statistics).
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value)
    }

    /// Reverse accumulation from a scalar loss. Every recorded node is
    /// visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: &Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(self, loss.tape) || loss.id == DETACHED {
            return Err(TensorError::DetachedNode);
        }
        if loss.value.len() != 1 {
            return Err(TensorError::NotScalarLoss(loss.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut slots: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.id] = Some(Tensor::full(loss.value.shape(), S::one()));
        for id in (0..=loss.id).rev() {
            let grad = match slots[id].clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &nodes[id].back {
                back(&grad, &mut slots);
            }
        }
        Ok(Gradients { slots })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a variable, or `None` when the loss does not depend
    /// on it.
    pub fn take(&mut self, var_id: usize) -> Option<Tensor<S>> {
        self.slots.get_mut(var_id).and_then(|s| s.take())
    }

    /// Like [`Gradients::take`] but materializing zeros for unused nodes.
    pub fn take_or_zeros(&mut self, var_id: usize, shape: &[usize]) -> Tensor<S> {
        self.take(var_id).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accum<S: Scalar>(slots: &mut [Option<Tensor<S>>], id: usize, delta: Tensor<S>) {
    match &mut slots[id] {
        Some(t) => t.add_assign(&delta).expect("gradient shape drift"),
        slot @ None => *slot = Some(delta),
    }
}

/// Tensor value bound to a tape node.
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
    value: Tensor<S>,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        Var { tape: self.tape, id: self.id, value: self.value.clone() }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn same_tape(&self, other: &Var<'t, S>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::DetachedNode)
        }
    }

    fn emit(&self, value: Tensor<S>, build: impl FnOnce() -> BackFn<S>) -> Var<'t, S> {
        let id = self.tape.record(build);
        Var { tape: self.tape, id, value }
    }

    /// Escape hatch for user-defined differentiable ops: `value` is the
    /// forward result and `back` maps the upstream gradient to the
    /// gradient w.r.t. this variable.
    pub fn custom_op(
        &self,
        value: Tensor<S>,
        back: impl Fn(&Tensor<S>) -> Tensor<S> + 'static,
    ) -> Var<'t, S> {
        let id = self.id;
        self.emit(value, move || Box::new(move |g, slots| accum(slots, id, back(g))))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let value = self.value.add(&other.value)?;
        let (a, b) = (self.id, other.id);
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, a, g.clone());
                accum(slots, b, g.clone());
            })
        }))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let value = self.value.sub(&other.value)?;
        let (a, b) = (self.id, other.id);
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, a, g.clone());
                accum(slots, b, g.scale(-S::one()));
            })
        }))
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let value = self.value.mul(&other.value)?;
        let (a, b) = (self.id, other.id);
        let (av, bv) = (self.value.clone(), other.value.clone());
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, a, g.mul(&bv).expect("mul grad"));
                accum(slots, b, g.mul(&av).expect("mul grad"));
            })
        }))
    }

    pub fn div(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let value = self.value.zip_map(&other.value, |a, b| a / b)?;
        let (a, b) = (self.id, other.id);
        let (bv, out) = (other.value.clone(), value.clone());
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let da = g.zip_map(&bv, |g, b| g / b).expect("div grad");
                let db = g
                    .zip_map(&out, |g, y| g * y)
                    .and_then(|t| t.zip_map(&bv, |t, b| -(t / b)))
                    .expect("div grad");
                accum(slots, a, da);
                accum(slots, b, db);
            })
        }))
    }

    pub fn neg(&self) -> Var<'t, S> {
        let id = self.id;
        self.emit(self.value.scale(-S::one()), move || {
            Box::new(move |g, slots| accum(slots, id, g.scale(-S::one())))
        })
    }

    pub fn add_scalar(&self, c: S) -> Var<'t, S> {
        let id = self.id;
        self.emit(self.value.map(|v| v + c), move || {
            Box::new(move |g, slots| accum(slots, id, g.clone()))
        })
    }

    pub fn mul_scalar(&self, c: S) -> Var<'t, S> {
        let id = self.id;
        self.emit(self.value.scale(c), move || {
            Box::new(move |g, slots| accum(slots, id, g.scale(c)))
        })
    }

    pub fn ln(&self) -> Var<'t, S> {
        let id = self.id;
        let xv = self.value.clone();
        self.emit(self.value.map(|v| v.ln()), move || {
            Box::new(move |g, slots| {
                accum(slots, id, g.zip_map(&xv, |g, x| g / x).expect("ln grad"))
            })
        })
    }

    pub fn exp(&self) -> Var<'t, S> {
        let id = self.id;
        let value = self.value.map(|v| v.exp());
        let out = value.clone();
        self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, id, g.mul(&out).expect("exp grad"))
            })
        })
    }

    pub fn sqrt(&self) -> Var<'t, S> {
        let id = self.id;
        let value = self.value.map(|v| v.sqrt());
        let out = value.clone();
        let half = S::from_f64(0.5);
        self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, id, g.zip_map(&out, |g, y| g * half / y).expect("sqrt grad"))
            })
        })
    }

    /// Logistic function, computed without overflowing for large |x|.
    pub fn sigmoid(&self) -> Var<'t, S> {
        let id = self.id;
        let value = self.value.map(sigmoid_scalar);
        let out = value.clone();
        self.emit(value, move || {
            Box::new(move |g, slots| {
                let d = g.zip_map(&out, |g, y| g * y * (S::one() - y)).expect("sigmoid grad");
                accum(slots, id, d)
            })
        })
    }

    pub fn leaky_relu(&self, slope: S) -> Var<'t, S> {
        let id = self.id;
        let xv = self.value.clone();
        let value = self.value.map(|v| if v > S::zero() { v } else { slope * v });
        self.emit(value, move || {
            Box::new(move |g, slots| {
                let d = g
                    .zip_map(&xv, |g, x| if x > S::zero() { g } else { g * slope })
                    .expect("leaky_relu grad");
                accum(slots, id, d)
            })
        })
    }

    pub fn sum_all(&self) -> Var<'t, S> {
        let id = self.id;
        let shape = self.value.shape().to_vec();
        self.emit(Tensor::scalar(self.value.sum()), move || {
            Box::new(move |g, slots| accum(slots, id, Tensor::full(&shape, g.item())))
        })
    }

    pub fn mean_all(&self) -> Var<'t, S> {
        let n = S::from_f64(self.value.len() as f64);
        self.sum_all().mul_scalar(S::one() / n)
    }

    /// Minimum over all elements; the gradient flows to the first
    /// occurrence of the minimum.
    pub fn reduce_min_all(&self) -> Var<'t, S> {
        let id = self.id;
        let (value, at) = self.value.min_with_index();
        let shape = self.value.shape().to_vec();
        self.emit(Tensor::scalar(value), move || {
            Box::new(move |g, slots| {
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[at] = g.item();
                accum(slots, id, d)
            })
        })
    }

    pub fn reduce_sum_keepdim(&self, axes: &[usize]) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = self.value.reduce_sum_keepdim(axes)?;
        let shape = self.value.shape().to_vec();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, id, g.broadcast_to(&shape).expect("reduce_sum grad"))
            })
        }))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = self.value.broadcast_to(target)?;
        let src = self.value.shape().to_vec();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, id, g.reduce_to_shape(&src).expect("broadcast grad"))
            })
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = self.value.reshape(shape)?;
        let orig = self.value.shape().to_vec();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| accum(slots, id, g.reshape(&orig).expect("reshape grad")))
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = self.value.permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| accum(slots, id, g.permute(&inverse).expect("permute grad")))
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = self.value.narrow(axis, start, len)?;
        let full = self.value.shape().to_vec();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let mut d = Tensor::zeros(&full);
                let outer: usize = full[..axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let gd = g.data();
                let dd = d.data_mut();
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * full[axis] * inner + start * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accum(slots, id, d)
            })
        }))
    }

    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| TensorError::BadSize("empty concat".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<&Tensor<S>> = parts.iter().map(|p| &p.value).collect();
        let value = Tensor::concat(&values, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths: Vec<usize> = parts.iter().map(|p| p.value.shape()[axis]).collect();
        Ok(first.emit(value, move || {
            Box::new(move |g, slots| {
                let mut offset = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    let piece = g.narrow(axis, offset, w).expect("concat grad");
                    accum(slots, id, piece);
                    offset += w;
                }
            })
        }))
    }

    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(other)?;
        let value = ops::matmul(&self.value, &other.value)?;
        let (a, b) = (self.id, other.id);
        let (av, bv) = (self.value.clone(), other.value.clone());
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let (da, db) = ops::matmul_backward(&av, &bv, g);
                accum(slots, a, da);
                accum(slots, b, db);
            })
        }))
    }

    pub fn conv2d(
        &self,
        weight: &Var<'t, S>,
        bias: Option<&Var<'t, S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, S>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let value = ops::conv2d(&self.value, &weight.value, bias.map(|b| &b.value), stride, pad)?;
        let (x, w) = (self.id, weight.id);
        let bid = bias.map(|b| b.id);
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let (dx, dw, db) = ops::conv2d_backward(&xv, &wv, g, stride, pad);
                accum(slots, x, dx);
                accum(slots, w, dw);
                if let Some(b) = bid {
                    accum(slots, b, db);
                }
            })
        }))
    }

    pub fn conv3d(
        &self,
        weight: &Var<'t, S>,
        bias: Option<&Var<'t, S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, S>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let value = ops::conv3d(&self.value, &weight.value, bias.map(|b| &b.value), stride, pad)?;
        let (x, w) = (self.id, weight.id);
        let bid = bias.map(|b| b.id);
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let (dx, dw, db) = ops::conv3d_backward(&xv, &wv, g, stride, pad);
                accum(slots, x, dx);
                accum(slots, w, dw);
                if let Some(b) = bid {
                    accum(slots, b, db);
                }
            })
        }))
    }

    pub fn upsample_trilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = ops::upsample_bilinear(&self.value, out_h, out_w)?;
        let (in_h, in_w) = (self.value.shape()[3], self.value.shape()[4]);
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                accum(slots, id, ops::upsample_bilinear_backward(g, in_h, in_w))
            })
        }))
    }

    pub fn gaussian_blur2d(&self, kernel: &[S]) -> Result<Var<'t, S>> {
        let id = self.id;
        let value = ops::gaussian_blur2d(&self.value, kernel)?;
        let k = kernel.to_vec();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| accum(slots, id, ops::gaussian_blur2d_backward(g, &k)))
        }))
    }

    /// Max-shifted exponent normalization along `axis`; lanes sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let shape = self.value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { axis, rank: shape.len() });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.value.data();
        let mut out = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut m = S::neg_infinity();
                for l in 0..lane {
                    let v = xd[base + l * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut total = S::zero();
                for l in 0..lane {
                    let e = (xd[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape.clone(), out)?;
        let id = self.id;
        let yv = value.clone();
        Ok(self.emit(value, move || {
            Box::new(move |g, slots| {
                let gd = g.data();
                let yd = yv.data();
                let mut dx = vec![S::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = S::zero();
                        for l in 0..lane {
                            dot += gd[base + l * inner] * yd[base + l * inner];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                accum(slots, id, Tensor::new(yv.shape().to_vec(), dx).expect("softmax grad"));
            })
        }))
    }
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Per-position normalization over the last axis (population variance)
/// followed by the affine `gamma * x_hat + beta`.
pub fn layer_norm<'t, S: Scalar>(
    x: &Var<'t, S>,
    gamma: &Var<'t, S>,
    beta: &Var<'t, S>,
    eps: S,
) -> Result<Var<'t, S>> {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let d = shape[rank - 1];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch(format!(
            "layer_norm affine {:?}/{:?} over last axis {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let inv_d = S::one() / S::from_f64(d as f64);
    let mu = x.reduce_sum_keepdim(&[rank - 1])?.mul_scalar(inv_d);
    let centered = x.sub(&mu.broadcast_to(&shape)?)?;
    let var = centered.mul(&centered)?.reduce_sum_keepdim(&[rank - 1])?.mul_scalar(inv_d);
    let denom = var.add_scalar(eps).sqrt();
    let normed = centered.div(&denom.broadcast_to(&shape)?)?;
    normed.mul(&gamma.broadcast_to(&shape)?)?.add(&beta.broadcast_to(&shape)?)
}

/// Per-channel batch statistics produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats<S: Scalar> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

/// Training-mode batch norm over `[N, C, T, H, W]`: normalizes each
/// channel with the population statistics of the current batch and
/// returns those statistics for the caller's running-average update.
pub fn batch_norm3d_train<'t, S: Scalar>(
    x: &Var<'t, S>,
    gamma: &Var<'t, S>,
    beta: &Var<'t, S>,
    eps: S,
) -> Result<(Var<'t, S>, BatchStats<S>)> {
    let shape = x.shape().to_vec();
    if shape.len() != 5 {
        return Err(TensorError::ShapeMismatch(format!("batch_norm3d expects rank 5, got {shape:?}")));
    }
    let c = shape[1];
    check_bn_affine(gamma, beta, c)?;
    let count = S::from_f64((shape[0] * shape[2] * shape[3] * shape[4]) as f64);
    let mu = x.reduce_sum_keepdim(&[0, 2, 3, 4])?.mul_scalar(S::one() / count);
    let centered = x.sub(&mu.broadcast_to(&shape)?)?;
    let var = centered
        .mul(&centered)?
        .reduce_sum_keepdim(&[0, 2, 3, 4])?
        .mul_scalar(S::one() / count);
    let stats = BatchStats {
        mean: mu.value().reshape(&[c])?,
        var: var.value().reshape(&[c])?,
    };
    let denom = var.add_scalar(eps).sqrt();
    let normed = centered.div(&denom.broadcast_to(&shape)?)?;
    let y = affine_per_channel(&normed, gamma, beta, &shape)?;
    Ok((y, stats))
}

/// Eval-mode batch norm: normalizes with frozen running statistics.
pub fn batch_norm3d_eval<'t, S: Scalar>(
    x: &Var<'t, S>,
    gamma: &Var<'t, S>,
    beta: &Var<'t, S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: S,
) -> Result<Var<'t, S>> {
    let shape = x.shape().to_vec();
    if shape.len() != 5 {
        return Err(TensorError::ShapeMismatch(format!("batch_norm3d expects rank 5, got {shape:?}")));
    }
    let c = shape[1];
    check_bn_affine(gamma, beta, c)?;
    let tape = x.tape;
    let mu = tape.constant(running_mean.reshape(&[1, c, 1, 1, 1])?);
    let denom = tape.constant(running_var.map(|v| (v + eps).sqrt()).reshape(&[1, c, 1, 1, 1])?);
    let centered = x.sub(&mu.broadcast_to(&shape)?)?;
    let normed = centered.div(&denom.broadcast_to(&shape)?)?;
    affine_per_channel(&normed, gamma, beta, &shape)
}

fn check_bn_affine<S: Scalar>(gamma: &Var<'_, S>, beta: &Var<'_, S>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

fn affine_per_channel<'t, S: Scalar>(
    normed: &Var<'t, S>,
    gamma: &Var<'t, S>,
    beta: &Var<'t, S>,
    shape: &[usize],
) -> Result<Var<'t, S>> {
    let c = shape[1];
    let g = gamma.reshape(&[c, 1, 1, 1])?.broadcast_to(shape)?;
    let b = beta.reshape(&[c, 1, 1, 1])?.broadcast_to(shape)?;
    normed.mul(&g)?.add(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_loss_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0_f64));
        let loss = x.mul(&x).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take(x.id()).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_sums_contributions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0_f64));
        let loss = x.add(&x).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take(x.id()).unwrap().item(), 2.0);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0_f64));
        let y = tape.leaf(Tensor::scalar(2.0_f64));
        let loss = x.mul(&x).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        assert!(grads.take(y.id()).is_none());
        assert_eq!(grads.take_or_zeros(y.id(), &[]).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(&x), Err(TensorError::NotScalarLoss(_))));
    }

    #[test]
    fn cross_tape_mixing_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(TensorError::DetachedNode)));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0_f64, 0.0]).unwrap());
        let y = x.softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);

        let x = tape.leaf(Tensor::new(vec![2], vec![1000.0_f64, 1000.0]).unwrap());
        let y = x.softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);

        let x = tape
            .leaf(Tensor::new(vec![3], vec![0.0_f64, 2.0_f64.ln(), 3.0_f64.ln()]).unwrap());
        let y = x.softmax(0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (g, e) in y.value().data().iter().zip(want) {
            assert!((g - e).abs() < 1e-12);
        }
        let total: f64 = y.value().data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::inference();
        let gamma = tape.leaf(Tensor::ones(&[2]));
        let beta = tape.leaf(Tensor::zeros(&[2]));

        let x = tape.leaf(Tensor::full(&[1, 2], 3.0_f64));
        let y = layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-5);
        }

        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0_f64, 3.0]).unwrap());
        let y = layer_norm(&x, &gamma, &beta, 1e-14).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-6);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_per_row_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[4, 6], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let gv = Tensor::from_fn(&[6], |_| rng.gen::<f64>() + 0.5);
        let bv = Tensor::from_fn(&[6], |_| rng.gen::<f64>() - 0.5);
        let eps = 1e-5;
        let tape = Tape::inference();
        let y = layer_norm(&tape.leaf(x.clone()), &tape.leaf(gv.clone()), &tape.leaf(bv.clone()), eps)
            .unwrap();
        for r in 0..4 {
            let row = &x.data()[r * 6..(r + 1) * 6];
            let mu: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 6.0;
            for c in 0..6 {
                let want = (row[c] - mu) / (var + eps).sqrt() * gv.data()[c] + bv.data()[c];
                let got = y.value().data()[r * 6 + c];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::new(vec![3], vec![-710.0_f64, 0.0, 710.0]).unwrap());
        let y = x.sigmoid();
        let d = y.value().data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 1.0);
        assert!(y.value().all_finite());
    }

    #[test]
    fn leaky_relu_examples() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0_f64, 2.0]).unwrap());
        let y = x.leaky_relu(0.01);
        assert_eq!(y.value().data(), &[-0.01, 2.0]);
    }

    #[test]
    fn batch_norm_train_examples() {
        let tape = Tape::new();
        let gamma = tape.leaf(Tensor::ones(&[1]));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        // constant channel -> zeros
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1, 4], 2.5_f64));
        let (y, stats) = batch_norm3d_train(&x, &gamma, &beta, 1e-9).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-3);
        }
        assert!((stats.mean.item() - 2.5).abs() < 1e-12);
        // channel values {0, 2} -> {-1, +1}
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0_f64, 2.0]).unwrap());
        let (y, stats) = batch_norm3d_train(&x, &gamma, &beta, 1e-14).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-6);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-6);
        assert!((stats.var.item() - 1.0).abs() < 1e-12);
    }
}
