//! Dense row-major tensor storage.
//!
//! `Tensor` is the substrate for every vector and matrix in the model:
//! feature frames, hidden states, attention weights, logits. Gradients are
//! populated by [`crate::tape::Tape::backward`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Gradient of some scalar loss w.r.t. this tensor, same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor shape {:?} does not hold {} values",
                shape,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Row vector `1×n`.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
            grad: None,
        }
    }

    /// Standard-normal entries scaled by `scale`.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[r * n..(r + 1) * n]
    }
}

/// log Σ exp(vᵢ), stable under max-shift. All `-inf` inputs give `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = values.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Two-argument [`log_sum_exp`], the workhorse of the CTC recursions.
pub fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
