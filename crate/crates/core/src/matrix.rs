//! Dense row-major f64 matrix with the handful of products backprop needs.
//!
//! Accumulation order inside every product is fixed (ascending k) and
//! parallelism only splits independent output rows, so results are
//! bit-reproducible regardless of thread count.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Work threshold (multiply-adds) below which products stay single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Row-tile height of the matmul micro-kernel (also the parallel grain).
const MM_ROW_TILE: usize = 4;
/// Column-tile width of the micro-kernel; accumulators for one tile fit in
/// vector registers.
const MM_COL_TILE: usize = 8;

/// Computes `out_block = a_block * b` for up to MM_ROW_TILE rows, tiling
/// columns so each 4x8 accumulator tile stays in registers across the k
/// loop. Every output entry accumulates over ascending k.
fn mm_row_block(a_block: &[f64], b: &[f64], out_block: &mut [f64], rows: usize, k: usize, m: usize) {
    let col_tiles = m / MM_COL_TILE;
    if rows == MM_ROW_TILE {
        for jt in 0..col_tiles {
            let j0 = jt * MM_COL_TILE;
            let mut acc = [[0.0f64; MM_COL_TILE]; MM_ROW_TILE];
            for kk in 0..k {
                let b_tile = &b[kk * m + j0..kk * m + j0 + MM_COL_TILE];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a_block[r * k + kk];
                    for c in 0..MM_COL_TILE {
                        acc_row[c] += av * b_tile[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out_block[r * m + j0..r * m + j0 + MM_COL_TILE].copy_from_slice(acc_row);
            }
        }
    } else {
        for jt in 0..col_tiles {
            let j0 = jt * MM_COL_TILE;
            for r in 0..rows {
                let mut acc = [0.0f64; MM_COL_TILE];
                for kk in 0..k {
                    let av = a_block[r * k + kk];
                    let b_tile = &b[kk * m + j0..kk * m + j0 + MM_COL_TILE];
                    for c in 0..MM_COL_TILE {
                        acc[c] += av * b_tile[c];
                    }
                }
                out_block[r * m + j0..r * m + j0 + MM_COL_TILE].copy_from_slice(&acc);
            }
        }
    }
    // Remainder columns.
    for j in col_tiles * MM_COL_TILE..m {
        for r in 0..rows {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_block[r * k + kk] * b[kk * m + j];
            }
            out_block[r * m + j] = acc;
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Gathers the listed columns, preserving the given order.
    pub fn gather_cols(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (o, &c) in idx.iter().enumerate() {
                dst[o] = src[c];
            }
        }
        out
    }

    /// Stacks `k` copies of the matrix on top of each other (branch-major).
    pub fn tile_rows(&self, k: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * k);
        for _ in 0..k {
            data.extend_from_slice(&self.data);
        }
        Matrix {
            rows: self.rows * k,
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "hadamard",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sum of each column as a 1 x cols matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self * other`, with the inner accumulation running over ascending k
    /// for every output entry, so results do not depend on tiling or thread
    /// count.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        let work = n * k * m;
        let body = |(block, out_block): (usize, &mut [f64])| {
            let i0 = block * MM_ROW_TILE;
            let rows = out_block.len() / m;
            mm_row_block(
                &self.data[i0 * k..(i0 + rows) * k],
                &other.data,
                out_block,
                rows,
                k,
                m,
            );
        };
        if work >= PAR_FLOP_THRESHOLD {
            out.data
                .par_chunks_mut(MM_ROW_TILE * m)
                .enumerate()
                .for_each(body);
        } else {
            out.data
                .chunks_mut(MM_ROW_TILE * m)
                .enumerate()
                .for_each(body);
        }
        Ok(out)
    }

    /// `self^T * other`; used for weight gradients (x^T * upstream).
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.transpose().matmul(other)
    }

    /// `self * other^T`; used for input gradients (upstream * W^T).
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.matmul(&other.transpose())
    }

    /// Adds a 1 x cols bias row to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Horizontal concatenation of column blocks.
    pub fn hconcat(blocks: &[&Matrix]) -> Matrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        for b in blocks {
            assert_eq!(b.rows, rows, "hconcat row mismatch");
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut at = 0;
            for b in blocks {
                dst[at..at + b.cols].copy_from_slice(b.row(r));
                at += b.cols;
            }
        }
        out
    }

    /// Splits into column blocks of the given widths; inverse of `hconcat`.
    pub fn split_cols(&self, widths: &[usize]) -> Vec<Matrix> {
        assert_eq!(widths.iter().sum::<usize>(), self.cols, "split widths");
        let mut out: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(self.rows, w)).collect();
        for r in 0..self.rows {
            let src = self.row(r);
            let mut at = 0;
            for (b, &w) in out.iter_mut().zip(widths) {
                b.row_mut(r).copy_from_slice(&src[at..at + w]);
                at += w;
            }
        }
        out
    }
}
