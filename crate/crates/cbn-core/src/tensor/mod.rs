//! Dense row-major `f64` tensors with the small operation surface the rest of
//! the crate needs: broadcasting elementwise arithmetic, axis reductions, and
//! 2-D convolution.

mod conv;
mod ops;
mod rng;

pub use conv::{conv2d_forward, conv2d_output_hw};
pub use ops::{elementwise, reduce_mean_over, ElementwiseOp};
pub use rng::Rng;

use crate::error::{CoreError, CoreResult};

/// Dense tensor of `f64` values in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor of the given shape filled with zeros.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Tensor of the given shape filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> CoreResult<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CoreError::Shape(format!(
                "buffer holds {} values but shape {:?} needs {}",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Wraps a single value as a rank-1 tensor of length 1.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor and returns its flat buffer.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> CoreResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} values) to {:?} ({} values)",
                self.shape,
                self.data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// The four dimensions of a rank-4 tensor, conventionally (N, C, H, W).
    pub fn dims4(&self) -> CoreResult<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(CoreError::Shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> CoreResult<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Value at a multi-dimensional index. Panics on out-of-range indices;
    /// intended for tests and small reference paths.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    /// Mutable access at a multi-dimensional index.
    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        let i = self.flat_index(index);
        &mut self.data[i]
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(
            index.len(),
            self.shape.len(),
            "index rank {} does not match tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut flat = 0;
        for (axis, (&i, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < dim, "index {i} out of range for axis {axis} (size {dim})");
            flat = flat * dim + i;
        }
        flat
    }

    /// Applies `f` to every element, returning a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius norm (square root of the sum of squares).
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute element, or zero for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// In-place `self += scale * other`; shapes must match exactly.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> CoreResult<()> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "axpy shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}
