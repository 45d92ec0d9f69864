//! Minimal dense linear algebra with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit; gradient-check fidelity outranks speed at desk
//! scale. Tensors are rank 1–3 (batch is the outer loop, not a tensor
//! axis). A [`Tape`] records the forward pass; [`Tape::backward`] replays
//! it in reverse for exact gradients.

mod checkpoint;
mod gradcheck;
mod init;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::xavier_uniform;
pub use tape::{MhaParams, Tape, TensorId};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} is invalid: {reason}")]
    BadShape { shape: Vec<usize>, reason: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("invalid config for {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Dense row-major tensor of 64-bit reals, rank 1–3.
///
/// Construction rejects NaN/Inf and shape/data disagreements, so a value
/// of this type is always finite and internally consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::BadShape {
                shape,
                reason: "rank must be 1..=3".into(),
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::BadShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros of a valid shape")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(TensorError::BadShape {
                    shape: vec![m, n],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count for rank-2 tensors; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count for rank-2 tensors; rank-1 tensors are all columns.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => *self.shape.last().unwrap(),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub(crate) fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(TensorError::BadShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::BadShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1, 2, 3, 4], vec![0.0; 24]),
            Err(TensorError::BadShape { .. })
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
