//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value type; it carries no graph state.
//! Differentiable computations are built on a [`Tape`]: leaves are registered
//! with [`Tape::leaf`], operations return [`Var`] handles, and
//! [`Tape::backward`] replays the recorded operations in reverse to populate
//! gradients. A tape belongs to a single forward pass and a single thread;
//! data parallelism happens *inside* individual operations, never across a
//! shared tape.

mod gradcheck;
mod ops;
mod optim;
mod tape;

pub use gradcheck::{central_difference, check_gradient};
pub use ops::{BatchNormMode, RunningStats, BN_EMA_DECAY, BN_EPSILON};
pub use optim::{sgd_step, SgdOptimizer};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Scalar element type for every tensor in the crate. Double precision keeps
/// the finite-difference gradient tolerances meaningful at desk scale.
pub type Scalar = f64;

/// Dense n-dimensional array with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} wants {} elements, buffer has {}",
                shape,
                expect,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform random tensor in `[lo, hi)` from the supplied generator.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: Scalar, hi: Scalar, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Stack identically shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty tensor list"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::invalid(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        Tensor::from_vec(&shape, data)
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Interpret a rank-3 `[h, w, c]` tensor as rank-4 `[1, h, w, c]`.
    pub(crate) fn as_batched(&self) -> Result<(Tensor, bool)> {
        match self.rank() {
            4 => Ok((self.clone(), false)),
            3 => {
                let mut shape = vec![1];
                shape.extend_from_slice(&self.shape);
                Ok((
                    Tensor {
                        shape,
                        data: self.data.clone(),
                    },
                    true,
                ))
            }
            r => Err(Error::invalid(format!("expected rank 3 or 4 tensor, got rank {r}"))),
        }
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::invalid(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub(crate) fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::invalid(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Accumulate `other` into `self` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "add_assign shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// L2 norm of the whole buffer.
    pub fn norm(&self) -> Scalar {
        self.data.iter().map(|x| x * x).sum::<Scalar>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn shape_product_equals_len() {
        let t = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(t.len(), 60);
        assert_eq!(t.shape().iter().product::<usize>(), t.len());
    }

    #[test]
    fn batched_view_roundtrip() {
        let t = Tensor::zeros(&[4, 5, 2]);
        let (b, squeezed) = t.as_batched().unwrap();
        assert!(squeezed);
        assert_eq!(b.shape(), &[1, 4, 5, 2]);
    }
}
