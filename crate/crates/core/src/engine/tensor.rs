use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix. Vectors are stored as `1 x n` or `n x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 2],
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    values.len()
                ),
            ));
        }
        Ok(Self {
            shape: [rows, cols],
            values,
        })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: [rows.len(), cols],
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: [rows.len(), cols],
            values: rows
                .iter()
                .flat_map(|r| r.iter().map(|&v| T::of(v)))
                .collect(),
        }
    }

    pub fn column(values: Vec<T>) -> Self {
        Self {
            shape: [values.len(), 1],
            values,
        }
    }

    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            shape: [1, values.len()],
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.values[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Rows selected by `idx`, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let cols = self.cols();
        let mut values = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            shape: [idx.len(), cols],
            values,
        }
    }

    /// Plain `self * rhs`; loop order i-k-j keeps both operands streaming.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            let o_row = &mut out.values[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &rhs.values[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows() != rhs.rows() {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}^T x {:?}", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        let mut out = Self::zeros(k, m);
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            let b_row = &rhs.values[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o_row = &mut out.values[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols() != rhs.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.rows(), self.cols(), rhs.rows());
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &rhs.values[j * k..(j + 1) * k];
                let dot = a_row
                    .iter()
                    .zip(b_row)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                out.values[i * m + j] = dot;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        let cols = self.shape[1].max(1);
        f.debug_list()
            .entries(self.values.chunks(cols).take(8))
            .finish()
    }
}
