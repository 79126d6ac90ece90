//! Dense row-major tensors over `f64`.
//!
//! `Tensor` is the flat numeric container behind every array in the crate:
//! student weights, teacher weights, loss coefficients, batches, gradients.
//! Shapes are dynamic; a rank-0 tensor holds a single scalar. All heavy
//! matrix products are routed through ndarray's GEMM.

use crate::error::{DlfError, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data. The element count
    /// must equal the product of the dimensions.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DlfError::shape(
                "from_vec",
                format!("shape {:?} expects {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(DlfError::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DlfError::shape(
                op,
                format!("expected rank-2 tensor, got shape {:?}", other),
            )),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(DlfError::shape(
                op,
                format!("operand shapes {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(DlfError::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        {
            let a = ArrayView2::from_shape((m, k), &self.data).expect("checked shape");
            let b = ArrayView2::from_shape((k, n), &other.data).expect("checked shape");
            let mut c = ArrayViewMut2::from_shape((m, n), out.data.as_mut_slice())
                .expect("checked shape");
            general_mat_mul(1.0, &a, &b, 0.0, &mut c);
        }
        Ok(out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums each row of a rank-2 tensor into a `(rows, 1)` column.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_sum")?;
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = self.data[i * n..(i + 1) * n].iter().sum();
        }
        Tensor::from_vec(vec![m, 1], data)
    }

    /// Sums each column of a rank-2 tensor into a `(1, cols)` row.
    pub fn col_sum(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("col_sum")?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![1, n], data)
    }

    /// Index of the largest value per row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (m, n) = self.dims2("argmax_rows")?;
        if n == 0 {
            return Err(DlfError::shape("argmax_rows", "zero columns"));
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Row-wise softmax of a rank-2 tensor, subtracting each row's maximum
    /// before exponentiation.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut denom = 0.0;
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        Tensor::from_vec(vec![m, n], data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(DlfError::shape(
                "dot",
                format!("operand shapes {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smallest probability fed to a logarithm anywhere in the crate.
pub const LOG_CLAMP: f64 = 1e-300;

/// Natural log with the input clamped below by [`LOG_CLAMP`].
pub fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.5);
        assert!(t.shape().is_empty());
        assert_eq!(t.item().unwrap(), 3.5);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dim() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.at2(0, 1), 4.0);
        assert_eq!(a, t.transpose().unwrap());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let s = a.softmax_rows().unwrap();
        for i in 0..2 {
            let sum: f64 = (0..3).map(|j| s.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!((0..3).all(|j| s.at2(i, j) >= 0.0));
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let a = Tensor::from_vec(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let s = a.softmax_rows().unwrap();
        assert!(s.is_finite());
        assert!((s.at2(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let a = Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.0, 0.2, 0.5, 0.5]).unwrap();
        assert_eq!(a.argmax_rows().unwrap(), vec![0, 1]);
    }
}
