//! A small f64 tensor library with a tape-based autodiff engine.
//!
//! The backward pass is built out of ordinary tape operations, so gradients
//! are themselves differentiable; that is what lets the gradient penalty
//! differentiate through a gradient. Everything is f64 and single-threaded,
//! which keeps runs bitwise reproducible.

mod kernels;
mod tape;

pub use kernels::{avg_pool2, conv2d_raw, leaky_relu_raw, upsample2};
pub use tape::{Tape, Var};

use std::sync::Arc;

/// A dense row-major f64 tensor of arbitrary rank.
///
/// Cloning is cheap (the buffer is shared); mutation goes through
/// [`make_mut`](Tensor::make_mut), which copies on write.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "shape {:?} does not match buffer of {} values",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn make_mut(&mut self) -> &mut [f64] {
        let buf: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }

    /// The value of a rank-0 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.shape.is_empty(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dim2(&self) -> (usize, usize) {
        match self.shape[..] {
            [a, b] => (a, b),
            _ => panic!("expected rank 2, got {:?}", self.shape),
        }
    }

    pub fn dim4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => panic!("expected rank 4, got {:?}", self.shape),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(len, self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact equality including shape; used by determinism tests and
    /// checkpoint round-trip checks.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
