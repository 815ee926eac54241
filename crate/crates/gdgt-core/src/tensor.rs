//! Dense row-major tensor value type.
//!
//! Image and feature tensors use the layout batch x channel x height x width.
//! A `Tensor` is plain data; gradients live on the [`crate::tape::Tape`] that
//! recorded the computation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor construction", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..numel {
            unravel(flat, shape, &mut idx);
            data.push(f(&idx));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        self.data[ravel(index, &self.shape)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = ravel(index, &self.shape);
        self.data[i] = value;
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index of a multi-index.
pub fn ravel(index: &[usize], shape: &[usize]) -> usize {
    let mut flat = 0;
    for (i, &x) in index.iter().enumerate() {
        debug_assert!(x < shape[i], "index {x} out of bounds for extent {}", shape[i]);
        flat = flat * shape[i] + x;
    }
    flat
}

/// Multi-index of a flat index, written into `out`.
pub fn unravel(flat: usize, shape: &[usize], out: &mut [usize]) {
    let mut rem = flat;
    for i in (0..shape.len()).rev() {
        out[i] = rem % shape[i];
        rem /= shape[i];
    }
}

/// NumPy-style broadcast of two shapes (shorter shape padded with leading 1s).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |shape: &[usize], from_right: usize| -> usize {
        if from_right < shape.len() {
            shape[shape.len() - 1 - from_right]
        } else {
            1
        }
    };
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let (da, db) = (dim(a, rank - 1 - i), dim(b, rank - 1 - i));
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::dim("broadcast", a, b));
        };
    }
    Ok(out)
}

/// Walks two operands in lockstep over a broadcast output shape, yielding
/// flat indices into each. Broadcast dims advance with stride 0.
pub struct BroadcastWalker {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    idx: Vec<usize>,
    a_flat: usize,
    b_flat: usize,
    remaining: usize,
}

impl BroadcastWalker {
    pub fn new(a: &[usize], b: &[usize], out_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let eff = |shape: &[usize]| -> Vec<usize> {
            // effective strides in the padded output frame; 0 where broadcast
            let s = strides(shape);
            let mut out = vec![0usize; rank];
            let pad = rank - shape.len();
            for i in 0..shape.len() {
                out[pad + i] = if shape[i] == 1 { 0 } else { s[i] };
            }
            out
        };
        BroadcastWalker {
            a_strides: eff(a),
            b_strides: eff(b),
            out_shape: out_shape.to_vec(),
            idx: vec![0; rank],
            a_flat: 0,
            b_flat: 0,
            remaining: out_shape.iter().product(),
        }
    }
}

impl Iterator for BroadcastWalker {
    type Item = (usize, usize);

    #[inline]
    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        let item = (self.a_flat, self.b_flat);
        self.remaining -= 1;
        // odometer increment from the last axis
        for ax in (0..self.out_shape.len()).rev() {
            self.idx[ax] += 1;
            self.a_flat += self.a_strides[ax];
            self.b_flat += self.b_strides[ax];
            if self.idx[ax] < self.out_shape[ax] {
                break;
            }
            self.a_flat -= self.a_strides[ax] * self.out_shape[ax];
            self.b_flat -= self.b_strides[ax] * self.out_shape[ax];
            self.idx[ax] = 0;
        }
        Some(item)
    }
}

/// Sums `grad` (shaped `from`) into the possibly-broadcast source shape `to`,
/// i.e. the gradient counterpart of broadcasting `to` up to `from`.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![T::ZERO; numel];
    for (i, (t_flat, _)) in BroadcastWalker::new(to, to, from).enumerate() {
        out[t_flat] += grad[i];
    }
    out
}
