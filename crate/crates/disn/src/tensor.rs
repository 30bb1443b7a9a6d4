//! Dense row-major 2-D tensor.
//!
//! Deliberately small: just the operations the disentanglement framework
//! needs, all shape-checked. A tensor always has at least one row and one
//! column and holds only finite values when built from external data.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// All-zeros tensor. Panics on a zero dimension, which is always a
    /// programmer error at a call site that controls the shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "tensor dimensions must be >= 1");
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn zeros_like(other: &Tensor<S>) -> Self {
        Tensor::zeros(other.rows, other.cols)
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        let mut t = Tensor::zeros(rows, cols);
        t.data.fill(value);
        t
    }

    /// Builds a tensor from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows < 1 || cols < 1 {
            return Err(Error::shape(
                "tensor construction",
                "rows >= 1 and cols >= 1",
                format!("{rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor construction",
                format!("{} values", rows * cols),
                format!("{}", data.len()),
            ));
        }
        let t = Tensor { rows, cols, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("tensor construction", "at least one row", "0 rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(
                    "tensor construction",
                    format!("{cols} columns"),
                    format!("{}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn expect_shape(&self, rows: usize, cols: usize, context: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::shape(
                context,
                format!("{rows}x{cols}"),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a + b, "tensor add")
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a - b, "tensor sub")
    }

    fn zip_with(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S, context: &str) -> Result<Tensor<S>> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += other * factor`, in place.
    pub fn add_scaled(&mut self, other: &Tensor<S>, factor: S) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "tensor add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = b.mul_add(factor, *a);
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(S::zero());
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                let brow = &other.data[l * n..(l + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = a.mul_add(brow[j], orow[j]);
                }
            }
        }
        Ok(out)
    }

    /// `self^T (k x m)^T * other (k x n)` -> (m x n). Useful for weight
    /// gradients without materializing a transpose.
    pub fn matmul_at_b(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_at_b",
                format!("shared row count {}", self.rows),
                format!("{}", other.rows),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for l in 0..k {
            let arow = &self.data[l * m..(l + 1) * m];
            let brow = &other.data[l * n..(l + 1) * n];
            for i in 0..m {
                let a = arow[i];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = a.mul_add(brow[j], orow[j]);
                }
            }
        }
        Ok(out)
    }

    /// `self (m x k) * other^T (n x k)^T` -> (m x n).
    pub fn matmul_a_bt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_a_bt",
                format!("shared col count {}", self.cols),
                format!("{}", other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for l in 0..k {
                    acc = arow[l].mul_add(brow[l], acc);
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// Concatenates two tensors with equal row counts along columns.
    pub fn concat_cols(left: &Tensor<S>, right: &Tensor<S>) -> Result<Tensor<S>> {
        if left.rows != right.rows {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows", left.rows),
                format!("{} rows", right.rows),
            ));
        }
        let cols = left.cols + right.cols;
        let mut out = Tensor::zeros(left.rows, cols);
        for r in 0..left.rows {
            out.row_mut(r)[..left.cols].copy_from_slice(left.row(r));
            out.row_mut(r)[left.cols..].copy_from_slice(right.row(r));
        }
        Ok(out)
    }

    /// Splits into `(first `at` columns, rest)`.
    pub fn split_cols(&self, at: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        if at == 0 || at >= self.cols {
            return Err(Error::shape(
                "split_cols",
                format!("split point in 1..{}", self.cols),
                format!("{at}"),
            ));
        }
        let mut left = Tensor::zeros(self.rows, at);
        let mut right = Tensor::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            left.row_mut(r).copy_from_slice(&self.row(r)[..at]);
            right.row_mut(r).copy_from_slice(&self.row(r)[at..]);
        }
        Ok((left, right))
    }

    /// Selects rows by index into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor<S> {
        assert!(!indices.is_empty(), "select_rows needs at least one row");
        let mut out = Tensor::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    /// Widens every element to `f64`.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Narrows (or keeps) every element as `f32`.
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Casts from another scalar type through `f64`.
    pub fn cast_from<T: Scalar>(other: &Tensor<T>) -> Tensor<S> {
        Tensor {
            rows: other.rows,
            cols: other.cols,
            data: other.data.iter().map(|v| S::of_f64(v.as_f64())).collect(),
        }
    }

    /// Exact bitwise equality, used by determinism and routing tests.
    pub fn bits_eq(&self, other: &Tensor<S>) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
