//! Minimal dense row-major matrix over any [`Scalar`]. Just enough container
//! for the d×d transposed spherical Jacobian and the rectangular Jacobians of
//! the brute-force determinant oracle; numeric factorizations live with their
//! callers.

use crate::tape::Scalar;

#[derive(Debug, Clone)]
pub struct Mat<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Scalar> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![R::constant(0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = A · x
    pub fn matvec(&self, x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = row[0] * x[0];
            for (a, b) in row[1..].iter().zip(&x[1..]) {
                acc = acc + *a * *b;
            }
            out.push(acc);
        }
        out
    }

    /// Gram matrix AᵀA.
    pub fn gram(&self) -> Mat<R> {
        let n = self.cols;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = self.get(0, i) * self.get(0, j);
                for k in 1..self.rows {
                    acc = acc + self.get(k, i) * self.get(k, j);
                }
                g.set(i, j, acc);
                g.set(j, i, acc);
            }
        }
        g
    }
}
