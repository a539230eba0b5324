//! Fréchet distance between Gaussian fits of two embedding sets.
//!
//! `d² = ||μx − μy||² + Tr(Σx) + Tr(Σy) − 2 Tr((Σx Σy)^½)`
//!
//! The trace of the matrix square root is taken through the symmetric route
//! `Σx = Q Λ Qᵀ`, `S = Λ^½ Qᵀ Σy Q Λ^½`, `Tr((Σx Σy)^½) = Σ sqrt(eig(S))`,
//! which only ever decomposes symmetric PSD matrices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{jacobi_eigen, LinalgError, Matrix, SymEigen};
use crate::store::EmbeddingSet;

/// Symmetry tolerance on covariance inputs, relative to their largest entry.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Eigenvalues in `[-PSD_TOL * λmax, 0)` are clamped to zero.
pub const PSD_TOL: f64 = 1e-8;
/// Negative distances above `-NEGATIVE_FID_TOL` are round-off and clamp to 0.
pub const NEGATIVE_FID_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FrechetError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix is not positive semi-definite (eigenvalue {eigenvalue:e}, largest {largest:e})")]
    NotPsd { eigenvalue: f64, largest: f64 },
    #[error("fréchet distance {0:e} is negative beyond round-off")]
    NegativeDistance(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl FrechetError {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            FrechetError::NotPsd { .. } | FrechetError::NegativeDistance(_) => true,
            FrechetError::Linalg(e) => matches!(e, LinalgError::NoConvergence(_) | LinalgError::Reconstruction(_)),
            _ => false,
        }
    }
}

pub type Result<T, E = FrechetError> = std::result::Result<T, E>;

/// Sample mean and unbiased (N − 1) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n: usize,
}

impl GaussianStats {
    /// Stats from given moments; the covariance is symmetrized.
    pub fn new(mean: Vec<f64>, mut cov: Matrix, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(FrechetError::TooFewSamples(n));
        }
        if cov.order() != mean.len() {
            return Err(FrechetError::DimMismatch(mean.len(), cov.order()));
        }
        cov.symmetrize();
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats> {
    let n = set.len();
    if n < 2 {
        return Err(FrechetError::TooFewSamples(n));
    }
    let d = set.dim();
    let rows = set.vectors();

    let mean: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut s = 0.0;
            for i in 0..n {
                s += rows[i * d + j] as f64;
            }
            s / n as f64
        })
        .collect();

    let centered: Vec<f64> = rows
        .par_chunks(d)
        .flat_map_iter(|row| row.iter().zip(&mean).map(|(&x, &m)| x as f64 - m))
        .collect();

    // Upper triangle, one output row per task; each entry sums samples in
    // index order so the result does not depend on the thread count.
    let denom = (n - 1) as f64;
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; d - i];
            for sample in centered.chunks_exact(d) {
                let xi = sample[i];
                for (a, &xj) in acc.iter_mut().zip(&sample[i..]) {
                    *a += xi * xj;
                }
            }
            acc.iter_mut().for_each(|a| *a /= denom);
            acc
        })
        .collect();

    let mut cov = Matrix::zeros(d);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            cov.set(i, i + off, v);
            cov.set(i + off, i, v);
        }
    }
    GaussianStats::new(mean, cov, n)
}

fn clamp_psd(eig: &mut SymEigen) -> Result<()> {
    let largest = eig.values.iter().copied().fold(0.0f64, f64::max);
    for v in eig.values.iter_mut() {
        if *v < 0.0 {
            if *v >= -PSD_TOL * largest {
                *v = 0.0;
            } else {
                return Err(FrechetError::NotPsd {
                    eigenvalue: *v,
                    largest,
                });
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a covariance with small negative eigenvalues
/// clamped to zero.
pub fn psd_eigen(cov: &Matrix) -> Result<SymEigen> {
    let mut eig = jacobi_eigen(cov, SYMMETRY_TOL)?;
    clamp_psd(&mut eig)?;
    Ok(eig)
}

/// `Tr((a b)^½)` for symmetric PSD `a`, `b`.
pub fn sqrtm_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.order() != b.order() {
        return Err(FrechetError::DimMismatch(a.order(), b.order()));
    }
    let asym = b.max_asymmetry();
    if asym > SYMMETRY_TOL * b.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric(asym).into());
    }
    let eig_a = psd_eigen(a)?;
    let sqrt_vals: Vec<f64> = eig_a.values.iter().map(|v| v.sqrt()).collect();
    let q = &eig_a.vectors;
    let qt_b_q = q.transpose().matmul(b).matmul(q);
    let n = a.order();
    let mut s = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, sqrt_vals[i] * qt_b_q.get(i, j) * sqrt_vals[j]);
        }
    }
    s.symmetrize();
    let eig_s = psd_eigen(&s)?;
    Ok(eig_s.values.iter().map(|v| v.sqrt()).sum())
}

/// Numerical rank of a covariance: eigenvalues above `d · ε · λmax`.
pub fn cov_rank(cov: &Matrix) -> Result<usize> {
    let eig = psd_eigen(cov)?;
    let largest = eig.values.iter().copied().fold(0.0f64, f64::max);
    let tol = cov.order() as f64 * f64::EPSILON * largest;
    Ok(eig.values.iter().filter(|&&v| v > tol && v > 0.0).count())
}

/// Fréchet distance between two fitted Gaussians.
pub fn fid_from_stats(x: &GaussianStats, y: &GaussianStats) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(FrechetError::DimMismatch(x.dim(), y.dim()));
    }
    let mean_term: f64 = x.mean.iter().zip(&y.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross = sqrtm_product(&x.cov, &y.cov)?;
    let value = mean_term + x.cov.trace() + y.cov.trace() - 2.0 * cross;
    if value >= 0.0 {
        Ok(value)
    } else if value > -NEGATIVE_FID_TOL {
        Ok(0.0)
    } else {
        Err(FrechetError::NegativeDistance(value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub dim: usize,
    pub cov_rank_x: usize,
    pub cov_rank_y: usize,
}

pub fn fid(x: &EmbeddingSet, y: &EmbeddingSet) -> Result<FidReport> {
    if x.dim() != y.dim() {
        return Err(FrechetError::DimMismatch(x.dim(), y.dim()));
    }
    let sx = fit_gaussian(x)?;
    let sy = fit_gaussian(y)?;
    Ok(FidReport {
        fid: fid_from_stats(&sx, &sy)?,
        n_x: sx.n,
        n_y: sy.n,
        dim: sx.dim(),
        cov_rank_x: cov_rank(&sx.cov)?,
        cov_rank_y: cov_rank(&sy.cov)?,
    })
}
