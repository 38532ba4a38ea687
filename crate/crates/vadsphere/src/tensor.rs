//! Dense row-major tensor of 64-bit reals.
//!
//! This is the only numeric carrier used by the network, the losses and the
//! optimizer. It is deliberately minimal: shape bookkeeping, indexing helpers
//! and a handful of elementwise utilities. All layer math lives in the
//! modules that own it.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Dense row-major n-dimensional array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of `[i, j]` in a rank-2 tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    /// Flat offset of `[b, t, d]` in a rank-3 tensor.
    #[inline]
    pub fn at3(&self, b: usize, t: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (b * self.shape[1] + t) * self.shape[2] + d
    }

    #[inline]
    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[self.at2(i, j)]
    }

    #[inline]
    pub fn get3(&self, b: usize, t: usize, d: usize) -> f64 {
        self.data[self.at3(b, t, d)]
    }

    /// Contiguous row `[i, ..]` of a rank-2 tensor.
    pub fn row2(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Contiguous frame `[b, t, ..]` of a rank-3 tensor.
    pub fn frame(&self, b: usize, t: usize) -> &[f64] {
        let w = self.shape[2];
        let base = (b * self.shape[1] + t) * w;
        &self.data[base..base + w]
    }

    pub fn frame_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let w = self.shape[2];
        let base = (b * self.shape[1] + t) * w;
        &mut self.data[base..base + w]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += scale * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LengthMismatch {
                shape: vec![2, 3],
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.get3(0, 0, 0), 0.0);
        assert_eq!(t.get3(0, 1, 2), 5.0);
        assert_eq!(t.get3(1, 0, 0), 6.0);
        assert_eq!(t.frame(1, 1), &[9.0, 10.0, 11.0]);
    }

    #[test]
    fn add_scaled_rejects_shape_mismatch() {
        let mut a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.add_scaled(&b, 1.0).is_err());
    }
}
