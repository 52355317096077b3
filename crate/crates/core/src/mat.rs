//! Dense row-major matrices and the handful of kernels the network needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                context: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    context: "matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

const TR: usize = 4;
const TC: usize = 16;

/// `out[i][j] (+)= sum_p a(i, p) * b[p][j]` for `b` stored `k x n`.
///
/// Outputs are computed in `TR x TC` register tiles. Every output still sums
/// over `p` in increasing order, so results match the naive triple loop
/// bit for bit.
#[inline(always)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> T + Copy, b: &[T], out: &mut [T], acc_init: bool) {
    let mut i = 0;
    while i + TR <= m {
        tile_rows::<T, TR>(i, k, n, a, b, out, acc_init);
        i += TR;
    }
    while i < m {
        tile_rows::<T, 1>(i, k, n, a, b, out, acc_init);
        i += 1;
    }
}

#[inline(always)]
fn tile_rows<T: Real, const R: usize>(
    i: usize,
    k: usize,
    n: usize,
    a: impl Fn(usize, usize) -> T,
    b: &[T],
    out: &mut [T],
    acc_init: bool,
) {
    let mut j = 0;
    while j + TC <= n {
        let mut acc = [[T::ZERO; TC]; R];
        if acc_init {
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TC]);
            }
        }
        for p in 0..k {
            let br: &[T; TC] = b[p * n + j..p * n + j + TC].try_into().unwrap();
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a(i + r, p);
                for c in 0..TC {
                    row[c] += av * br[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * n + j..(i + r) * n + j + TC].copy_from_slice(row);
        }
        j += TC;
    }
    if j < n {
        let w = n - j;
        for r in i..i + R {
            let o = &mut out[r * n + j..r * n + n];
            if !acc_init {
                o.fill(T::ZERO);
            }
            for p in 0..k {
                let av = a(r, p);
                let br = &b[p * n + j..p * n + n];
                for c in 0..w {
                    o[c] += av * br[c];
                }
            }
        }
    }
}

/// `out = a (m x k) * b (k x n)`, overwriting `out`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    gemm(m, k, n, |i, p| a[i * k + p], b, out, false);
}

/// `out += a^T * b` where `a` is `r x m` and `b` is `r x n`; `out` is `m x n`.
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], r: usize, m: usize, n: usize, out: &mut [T]) {
    gemm(m, r, n, |i, p| a[p * m + i], b, out, true);
}

/// `out = a * b^T` where `a` is `m x k` and `b` is `n x k`; `out` is `m x n`.
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut bt = alloc::vec![T::ZERO; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(m, k, n, |i, p| a[i * k + p], &bt, out, false);
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler keep independent FMA chains.
    let mut acc = [T::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        matmul(&a, &b, 2, 3, 4, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }

        // a^T b with a: 2x3, b: 2x4
        let b2: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut at = vec![0.0; 12];
        matmul_at_acc(&a, &b2, 2, 3, 4, &mut at);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|r| a[r * 3 + i] * b2[r * 4 + j]).sum();
                assert_eq!(at[i * 4 + j], want);
            }
        }

        // a b^T with a: 2x3, b: 4x3
        let b3: Vec<f64> = (0..12).map(|v| 1.0 - v as f64).collect();
        let mut bt = vec![0.0; 8];
        matmul_bt(&a, &b3, 2, 3, 4, &mut bt);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b3[j * 3 + p]).sum();
                assert_eq!(bt[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn tiled_kernels_match_naive_on_ragged_shapes() {
        let (m, k, n) = (9, 7, 37);
        let a: Vec<f32> = (0..m * k).map(|v| ((v * 37 % 11) as f32 - 5.0) * 0.13).collect();
        let b: Vec<f32> = (0..k * n).map(|v| ((v * 17 % 13) as f32 - 6.0) * 0.07).collect();
        let mut out = vec![0.0f32; m * n];
        matmul(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0f32;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert_eq!(out[i * n + j], want);
            }
        }
        // a^T b with a: k x m, b: k x n, accumulating onto ones.
        let mut acc = vec![1.0f32; m * n];
        matmul_at_acc(&a, &b, k, m, n, &mut acc);
        for i in 0..m {
            for j in 0..n {
                let mut want = 1.0f32;
                for p in 0..k {
                    want += a[p * m + i] * b[p * n + j];
                }
                assert_eq!(acc[i * n + j], want);
            }
        }
    }
}
