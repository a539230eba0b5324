//! Dense symmetric matrices and a cyclic Jacobi eigensolver.

use rayon::prelude::*;
use thiserror::Error;

/// Off-diagonal Frobenius norm at which a sweep is considered converged,
/// relative to the Frobenius norm of the input.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Maximum relative Frobenius error of `Q diag(values) Q^T` against the input.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square: {len} values for order {n}")]
    NotSquare { n: usize, len: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("eigendecomposition reconstruction error {0:e} exceeds tolerance")]
    Reconstruction(f64),
    #[error("non-finite matrix entry")]
    NonFinite,
}

/// Square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::NotSquare { n, len: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replace with `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in i + 1..self.n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`; rows computed in parallel, each with a fixed
    /// summation order.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = vec![0.0; n * n];
        out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for (r, &b) in row.iter_mut().zip(other.row(k)) {
                    *r += a * b;
                }
            }
        });
        Matrix { n, data: out }
    }
}

/// Eigenpairs of a symmetric matrix: `vectors` holds eigenvectors as columns,
/// `values` sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for j in 0..n {
                scaled.set(i, j, scaled.get(i, j) * self.values[j]);
            }
        }
        scaled.matmul(&self.vectors.transpose())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over all `(p, q)` pairs in row order, annihilating each
/// off-diagonal entry with a plane rotation, until the off-diagonal norm
/// drops below `JACOBI_TOL * ||A||_F`. The result is checked by
/// reconstruction before it is returned.
pub fn jacobi_eigen(input: &Matrix, sym_tol: f64) -> Result<SymEigen, LinalgError> {
    let n = input.order();
    if input.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let asym = input.max_asymmetry();
    if asym > sym_tol * input.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let mut a = input.clone();
    a.symmetrize();
    let norm = a.frobenius();
    let mut v = Matrix::identity(n);

    let off_norm = |a: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = norm == 0.0 || off_norm(&a) <= JACOBI_TOL * norm;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
        converged = off_norm(&a) <= JACOBI_TOL * norm;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    let eig = SymEigen { values, vectors };

    if norm > 0.0 {
        let rec = eig.reconstruct();
        let diff: f64 = rec
            .as_slice()
            .iter()
            .zip(input.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let rel = diff / norm;
        // written negated so a NaN residual fails too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(rel <= RECONSTRUCTION_TOL) {
            return Err(LinalgError::Reconstruction(rel));
        }
    }
    Ok(eig)
}

/// Apply `A <- J^T A J`, `V <- V J` for the rotation in plane `(p, q)`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.order();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}
