//! Row-major `f64` tensors.
//!
//! Deliberately minimal: dense layers and their gradients only ever need
//! rank-1 and rank-2 tensors, elementwise ops and matrix products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// A 2-D tensor from nested rows. Rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Errors with `context` if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// `self (n,k) * other (k,m) -> (n,m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self (n,k)ᵀ * other (n,m) -> (k,m)`. Used for weight gradients.
    pub fn transpose_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.rows() != other.rows() {
            return Err(Error::ShapeMismatch(format!(
                "transpose_matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[i * m..(i + 1) * m];
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![k, m],
            data: out,
        })
    }

    /// `self (n,k) * other (m,k)ᵀ -> (n,m)`. Used to push gradients back a layer.
    pub fn matmul_transpose(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.cols() {
            return Err(Error::ShapeMismatch(format!(
                "matmul_transpose {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let arow = &self.data[i * k..(i + 1) * k];
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sum over rows of a rank-2 tensor, yielding shape `(cols,)`.
    pub fn column_sums(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_matmul_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        // aᵀ g computed by hand: (3,2) result
        let expected = [
            1.0 * 0.5 + 4.0 * 2.0,
            1.0 * -1.0 + 4.0 * 0.25,
            2.0 * 0.5 + 5.0 * 2.0,
            2.0 * -1.0 + 5.0 * 0.25,
            3.0 * 0.5 + 6.0 * 2.0,
            3.0 * -1.0 + 6.0 * 0.25,
        ];
        assert_eq!(a.transpose_matmul(&g).unwrap().data(), &expected);
    }

    #[test]
    fn matmul_transpose_inverts_roles() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        // g (2,2) * wᵀ where w is (rows=m,cols=k): here m=2,k=2
        let c = g.matmul_transpose(&w).unwrap();
        assert_eq!(c.data(), &[3.0, 5.0, 8.0, 12.0]);
    }

    #[test]
    fn column_sums_adds_rows() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap();
        assert_eq!(a.column_sums().data(), &[11.0, 22.0]);
    }
}
