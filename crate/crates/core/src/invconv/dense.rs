//! Dense convolution matrix of a padded block, used as an oracle.
//!
//! Rows and columns are indexed in the block's canonical order: pixels in
//! the raster order of [`MaskedKernel::orientation`] (rows and columns
//! walked away from the padded sides), channels innermost. In that order a
//! correctly masked block gives a lower unit-triangular matrix.

use super::MaskedKernel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Orientation, Tensor};

/// Largest `H * W * C` for which a dense matrix is built.
pub const DENSE_CAP: usize = 4096;

#[derive(Clone, Debug)]
pub struct ConvMatrix<T> {
    side: usize,
    h: usize,
    w: usize,
    c: usize,
    orientation: Orientation,
    data: Vec<T>,
}

impl<T: Scalar> ConvMatrix<T> {
    pub fn build(kernel: &MaskedKernel<T>, h: usize, w: usize) -> Result<Self> {
        let c = kernel.channels();
        let side = h * w * c;
        if side > DENSE_CAP {
            return Err(Error::TooLargeForDense { side, cap: DENSE_CAP });
        }
        let k = kernel.k();
        let orientation = kernel.orientation();
        let (ro, co) = orientation.offsets(k);
        let mut m = ConvMatrix {
            side,
            h,
            w,
            c,
            orientation,
            data: vec![T::zero(); side * side],
        };
        let wt = kernel.weights();
        for i in 0..h {
            for j in 0..w {
                for out_c in 0..c {
                    let row = m.index(out_c, i, j);
                    for p in 0..k {
                        let Some(xi) = (i + p).checked_sub(ro).filter(|&v| v < h) else {
                            continue;
                        };
                        for q in 0..k {
                            let Some(xj) = (j + q).checked_sub(co).filter(|&v| v < w) else {
                                continue;
                            };
                            for in_c in 0..c {
                                let col = m.index(in_c, xi, xj);
                                m.data[row * side + col] += wt.at(out_c, in_c, p, q);
                            }
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.side + col]
    }

    /// Canonical position of `(c, i, j)`.
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        let ri = if self.orientation.pads_top() { i } else { self.h - 1 - i };
        let rj = if self.orientation.pads_left() { j } else { self.w - 1 - j };
        (ri * self.w + rj) * self.c + c
    }

    /// Vectorize sample `n` of `x` in canonical order.
    pub fn vectorize(&self, x: &Tensor<T>, n: usize) -> Vec<T> {
        assert_eq!(x.dims()[1..], [self.c, self.h, self.w]);
        let mut v = vec![T::zero(); self.side];
        for c in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    v[self.index(c, i, j)] = x.at(n, c, i, j);
                }
            }
        }
        v
    }

    /// Inverse of [`vectorize`](Self::vectorize) for one sample.
    pub fn unvectorize(&self, v: &[T]) -> Tensor<T> {
        Tensor::from_fn([1, self.c, self.h, self.w], |[_, c, i, j]| v[self.index(c, i, j)])
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        self.data
            .chunks_exact(self.side)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// No nonzero strictly above the diagonal (exact comparison).
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.side).all(|r| self.data[r * self.side + r + 1..(r + 1) * self.side].iter().all(|v| *v == T::zero()))
    }

    /// Every diagonal entry exactly one.
    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.side).all(|r| self.get(r, r) == T::one())
    }

    /// Determinant of a triangular matrix: product of its diagonal.
    pub fn triangular_det(&self) -> T {
        (0..self.side).map(|r| self.get(r, r)).fold(T::one(), |a, b| a * b)
    }

    pub fn max_row_nonzeros(&self) -> usize {
        self.data
            .chunks_exact(self.side)
            .map(|row| row.iter().filter(|v| **v != T::zero()).count())
            .max()
            .unwrap_or(0)
    }

    /// Forward substitution `M x = y` using only the lower triangle.
    pub fn solve_lower(&self, y: &[T]) -> Vec<T> {
        let mut x = y.to_vec();
        for r in 0..self.side {
            let row = &self.data[r * self.side..r * self.side + r];
            let s: T = row.iter().zip(&x[..r]).map(|(&a, &b)| a * b).sum();
            x[r] = (x[r] - s) / self.get(r, r);
        }
        x
    }

    /// Apply the block to every sample of `x` via the matrix.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let samples: Vec<_> = (0..x.n()).map(|n| self.unvectorize(&self.matvec(&self.vectorize(x, n)))).collect();
        Tensor::stack(&samples).expect("same sample dims")
    }

    /// Invert every sample of `y` by dense triangular solve.
    pub fn solve(&self, y: &Tensor<T>) -> Tensor<T> {
        let samples: Vec<_> = (0..y.n()).map(|n| self.unvectorize(&self.solve_lower(&self.vectorize(y, n)))).collect();
        Tensor::stack(&samples).expect("same sample dims")
    }
}
