//! Small blocked GEMM used by the optimized convolution path.
//!
//! Every output element accumulates over the inner dimension in ascending
//! order, so results do not depend on how rows are split across threads.

use rayon::prelude::*;

use crate::tensor::Scalar;

const ROW_BLOCK: usize = 4;
const COL_TILE: usize = 256;

/// View of a `rows x cols` operand with arbitrary element strides, so the
/// same kernel serves `A` and `A^T`.
#[derive(Clone, Copy)]
pub struct StridedMat<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Scalar> StridedMat<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        StridedMat {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        StridedMat {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// `c = a * b` for `a: m x k` (strided), `b: k x n` row-major, `c: m x n`.
/// Single-threaded.
pub fn gemm_serial<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: StridedMat<'_, T>,
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (block, c_block) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
        row_block(block * ROW_BLOCK, n, k, a, b, c_block);
    }
}

/// Same as [`gemm_serial`], with row blocks spread over the rayon pool.
pub fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: StridedMat<'_, T>, b: &[T], c: &mut [T]) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_block)| row_block(block * ROW_BLOCK, n, k, a, b, c_block));
}

fn row_block<T: Scalar>(
    row0: usize,
    n: usize,
    k: usize,
    a: StridedMat<'_, T>,
    b: &[T],
    c_block: &mut [T],
) {
    let rows = c_block.len() / n;
    c_block.fill(T::zero());
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_TILE).min(n);
        for p in 0..k {
            let b_row = &b[p * n + j0..p * n + j1];
            for r in 0..rows {
                let coef = a.get(row0 + r, p);
                let c_row = &mut c_block[r * n + j0..r * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += coef * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `c = a * b^T` for row-major `a: m x k`, `b: n x k`, `c: m x n`.
/// Dot products use eight interleaved partial sums combined in a fixed order.
pub fn gemm_nt_serial<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for i in 0..chunks {
        let xs = &x[i * 8..i * 8 + 8];
        let ys = &y[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
