//! Dense row-major `f64` matrices and the handful of kernels the encoder
//! and training loop are built on.

use serde::{Deserialize, Serialize};

/// A dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics if the length does not
    /// match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// Copies `src` into the column band `[col0, col0 + src.cols)`.
    pub fn set_col_band(&mut self, col0: usize, src: &Mat) {
        debug_assert_eq!(self.rows, src.rows);
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[col0..col0 + src.cols];
            dst.copy_from_slice(src.row(i));
        }
    }

    /// Adds `src` into the column band `[col0, col0 + src.cols)`.
    pub fn add_col_band(&mut self, col0: usize, src: &Mat) {
        debug_assert_eq!(self.rows, src.rows);
        for i in 0..self.rows {
            for (d, s) in self.row_mut(i)[col0..col0 + src.cols].iter_mut().zip(src.row(i)) {
                *d += s;
            }
        }
    }

    /// Extracts the column band `[col0, col0 + width)` as a new matrix.
    pub fn col_band(&self, col0: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[col0..col0 + width]);
        }
        out
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; the summation order is fixed and data-independent.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (a8, a_tail) = a.split_at(a.len() - a.len() % 8);
    let (b8, b_tail) = b.split_at(b.len() - b.len() % 8);
    for (ca, cb) in a8.chunks_exact(8).zip(b8.chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// `a (m x k) * b (k x n)`, axpy inner loop over rows of `b` so every
/// access is contiguous.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            for (o, &blj) in orow.iter_mut().zip(b.row(l)) {
                *o += ail * blj;
            }
        }
    }
    out
}

/// `a (m x k) * b^T (k x n)` where `b` is `n x k`: row-by-row dot products.
pub fn matmul_tb(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_tb inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            *out.at_mut(i, j) = dot(arow, b.row(j));
        }
    }
    out
}

/// `a^T (m x k) * b (k x n)` where `a` is `k x m`: rank-1 accumulation.
pub fn matmul_ta(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_ta inner dimension mismatch");
    let mut out = Mat::zeros(a.cols, b.cols);
    for l in 0..a.rows {
        let arow = a.row(l);
        let brow = b.row(l);
        for (i, &ali) in arow.iter().enumerate() {
            if ali == 0.0 {
                continue;
            }
            for (o, &blj) in out.row_mut(i).iter_mut().zip(brow) {
                *o += ali * blj;
            }
        }
    }
    out
}
