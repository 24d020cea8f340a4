//! Dense LU factorization with partial pivoting.
//!
//! Sized for absorbing-chain systems of at most a few hundred states.

use crate::error::{Error, Result};

/// Pivots smaller than this in magnitude mark the matrix as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Lu {
    dim: usize,
    /// Packed factors: strict lower part holds L (unit diagonal), upper part holds U.
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factorizes a row-major `dim x dim` matrix.
    pub fn factor(mut a: Vec<f64>, dim: usize) -> Result<Self> {
        assert_eq!(a.len(), dim * dim, "matrix is not square");
        let mut perm: Vec<usize> = (0..dim).collect();
        for col in 0..dim {
            let mut pivot = col;
            let mut best = a[col * dim + col].abs();
            for row in col + 1..dim {
                let v = a[row * dim + col].abs();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best < SINGULAR_PIVOT {
                return Err(Error::Unreachable);
            }
            if pivot != col {
                for j in 0..dim {
                    a.swap(col * dim + j, pivot * dim + j);
                }
                perm.swap(col, pivot);
            }
            let diag = a[col * dim + col];
            for row in col + 1..dim {
                let factor = a[row * dim + col] / diag;
                a[row * dim + col] = factor;
                if factor != 0.0 {
                    for j in col + 1..dim {
                        a[row * dim + j] -= factor * a[col * dim + j];
                    }
                }
            }
        }
        Ok(Self { dim, lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        // A = P^T L U, so A^T x = b  <=>  U^T L^T (P x) = b.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// Explicit inverse, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[col] = 1.0;
            let x = self.solve(&e);
            for row in 0..n {
                inv[row * n + col] = x[row];
            }
        }
        inv
    }
}
