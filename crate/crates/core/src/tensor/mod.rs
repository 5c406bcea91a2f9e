//! Dense row-major tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is the plain value type: a shape plus shared row-major
//! storage. Differentiable computation happens on [`tape::Var`], which
//! wraps a `Tensor` and records backward closures on a [`tape::Tape`].

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad axis {axis} for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("kernel does not fit padded input: {0}")]
    KernelTooLarge(String),
    #[error("bad size: {0}")]
    BadSize(String),
    #[error("blur sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("variables belong to different tapes")]
    DetachedNode,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array, row-major, with cheaply clonable storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); numel(shape)]) }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel(shape)]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let data = (0..numel(shape)).map(|i| f(i)).collect();
        Self { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data)
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same storage, new shape. The element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used on gradient buffers.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        let dst = Arc::make_mut(&mut self.data);
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_f64(self.data.len() as f64)
    }

    /// Minimum value and the flat index of its first occurrence.
    pub fn min_with_index(&self) -> (S, usize) {
        let mut best = self.data[0];
        let mut at = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v < best {
                best = v;
                at = i;
            }
        }
        (best, at)
    }

    pub fn max_value(&self) -> S {
        self.data.iter().fold(S::neg_infinity(), |acc, &v| if v > acc { v } else { acc })
    }

    /// Reorder axes; `perm` must be a permutation of `0..rank`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if perm.len() != rank {
            return Err(TensorError::ShapeMismatch(format!(
                "permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::ShapeMismatch(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides_of(&self.shape);
        let out_strides = strides_of(&out_shape);
        let mut data = vec![S::zero(); self.data.len()];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut out_flat = 0;
            for axis in 0..rank {
                let coord = rem / in_strides[axis];
                rem %= in_strides[axis];
                let out_axis = perm.iter().position(|&p| p == axis).unwrap();
                out_flat += coord * out_strides[out_axis];
            }
            data[out_flat] = v;
        }
        Ok(Self { shape: out_shape, data: Arc::new(data) })
    }

    /// Broadcast to `target` with trailing-dimension alignment: each source
    /// axis must equal the target axis or be 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape.as_slice() == target {
            return Ok(self.clone());
        }
        let rank = target.len();
        if self.rank() > rank {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, target
            )));
        }
        let offset = rank - self.rank();
        for (i, &t) in target.iter().enumerate() {
            let s = if i < offset { 1 } else { self.shape[i - offset] };
            if s != 1 && s != t {
                return Err(TensorError::ShapeMismatch(format!(
                    "cannot broadcast {:?} to {:?}",
                    self.shape, target
                )));
            }
        }
        let src_strides = strides_of(&self.shape);
        let out_strides = strides_of(target);
        let mut data = vec![S::zero(); numel(target)];
        for (out_flat, slot) in data.iter_mut().enumerate() {
            let mut rem = out_flat;
            let mut src_flat = 0;
            for axis in 0..rank {
                let coord = rem / out_strides[axis];
                rem %= out_strides[axis];
                if axis >= offset && self.shape[axis - offset] != 1 {
                    src_flat += coord * src_strides[axis - offset];
                }
            }
            *slot = self.data[src_flat];
        }
        Ok(Self { shape: target.to_vec(), data: Arc::new(data) })
    }

    /// Sum-reduce back to `src` shape, inverting a broadcast.
    pub fn reduce_to_shape(&self, src: &[usize]) -> Result<Self> {
        if self.shape.as_slice() == src {
            return Ok(self.clone());
        }
        let rank = self.rank();
        let offset = rank - src.len();
        let src_strides = strides_of(src);
        let out_strides = strides_of(&self.shape);
        let mut data = vec![S::zero(); numel(src)];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut src_flat = 0;
            for axis in 0..rank {
                let coord = rem / out_strides[axis];
                rem %= out_strides[axis];
                if axis >= offset && src[axis - offset] != 1 {
                    src_flat += coord * src_strides[axis - offset];
                }
            }
            data[src_flat] += v;
        }
        Tensor::new(src.to_vec(), data)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn reduce_sum_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        for &a in axes {
            if a >= rank {
                return Err(TensorError::BadAxis { axis: a, rank });
            }
        }
        let mut out_shape = self.shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let in_strides = strides_of(&self.shape);
        let out_strides = strides_of(&out_shape);
        let mut data = vec![S::zero(); numel(&out_shape)];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            let mut out_flat = 0;
            for axis in 0..rank {
                let coord = rem / in_strides[axis];
                rem %= in_strides[axis];
                if out_shape[axis] != 1 {
                    out_flat += coord * out_strides[axis];
                }
            }
            data[out_flat] += v;
        }
        Tensor::new(out_shape, data)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
        if start + len > self.shape[axis] {
            return Err(TensorError::BadSize(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * self.shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor::new(out_shape, data)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::BadSize("empty concat".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::ShapeMismatch("concat rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(TensorError::ShapeMismatch(format!(
                        "concat {:?} vs {:?} along axis {axis}",
                        p.shape, first.shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(out_shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_data_and_checks_count() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_on_shapes() {
        let t = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.broadcast_to(&[2, 2, 3]).unwrap();
        assert_eq!(b.shape(), &[2, 2, 3]);
        assert_eq!(b.data()[..3], [1.0, 2.0, 3.0]);
        let r = b.reduce_to_shape(&[1, 3]).unwrap();
        assert_eq!(r.data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let t = Tensor::<f64>::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 2).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reduce_sum_keepdim_over_middle_axis() {
        let t = Tensor::<f64>::new(vec![2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let r = t.reduce_sum_keepdim(&[1]).unwrap();
        assert_eq!(r.shape(), &[2, 1, 2]);
        assert_eq!(r.data(), &[4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn min_with_index_returns_first_hit() {
        let t = Tensor::<f64>::new(vec![4], vec![3.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.min_with_index(), (1.0, 1));
    }
}
