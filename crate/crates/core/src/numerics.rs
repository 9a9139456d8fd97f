//! Small dense linear algebra and the seeded random stream shared by every
//! other module.
//!
//! Response dimensions are small (the synthetic benchmarks are 1-d, the
//! reduced climate targets at most 4-d), so matrices are plain row-major
//! `Vec<f64>` buffers and everything is computed in `f64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Symmetric `d × d` matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = scale;
        }
        m
    }

    /// Builds a matrix from rows, symmetrizing as `(A + Aᵀ)/2`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::Empty("matrix rows"));
        }
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            check_dim(dim, row.len())?;
            data.extend_from_slice(row);
        }
        let mut m = Self { dim, data };
        m.symmetrize();
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Returns `self + shift·I`.
    pub fn add_diagonal(&self, shift: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.dim {
            m.data[i * self.dim + i] += shift;
        }
        m
    }

    /// Keeps the diagonal, zeroes everything else.
    pub fn diagonal_part(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            m.data[i * self.dim + i] = self.get(i, i);
        }
        m
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|v| v * factor).collect() }
    }

    pub fn symmetrize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (self.data[i * d + j] + self.data[j * d + i]);
                self.data[i * d + j] = avg;
                self.data[j * d + i] = avg;
            }
        }
    }

    /// Relative Frobenius distance `‖A − B‖ / max(‖A‖, tiny)`.
    pub fn rel_frobenius_error(&self, other: &SymMatrix) -> f64 {
        let num: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = self.data.iter().map(|a| a * a).sum();
        num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE)
    }
}

/// Lower Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholFactor {
    dim: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Reconstructs `A = L·Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.dim;
        let mut m = SymMatrix::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                m.data[i * d + j] = v;
                m.data[j * d + i] = v;
            }
        }
        m
    }

    /// Diagonal entry `A_jj` of the factored matrix.
    pub fn matrix_diag(&self, j: usize) -> f64 {
        (0..=j).map(|k| self.get(j, k).powi(2)).sum()
    }

    /// Solves `L z = v` in place.
    fn forward_solve(&self, v: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[i * d + k] * v[k];
            }
            v[i] = s / self.lower[i * d + i];
        }
    }
}

/// Maximum-likelihood covariance (denominator `n`) of `points` about `mean`.
///
/// `points` is a flat row-major buffer of `n` rows of length `mean.len()`.
pub fn sample_covariance(points: &[f64], mean: &[f64]) -> Result<SymMatrix> {
    let d = mean.len();
    if d == 0 {
        return Err(Error::Empty("mean vector"));
    }
    if points.is_empty() {
        return Err(Error::Empty("covariance points"));
    }
    if points.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: points.len() % d });
    }
    let n = points.len() / d;
    let mut cov = SymMatrix::zeros(d);
    let mut diff = vec![0.0; d];
    for row in points.chunks_exact(d) {
        for (k, (x, m)) in row.iter().zip(mean).enumerate() {
            diff[k] = x - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov.data[i * d + j] += diff[i] * diff[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov.data[i * d + j] * inv_n;
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }
    Ok(cov)
}

/// Cholesky–Banachiewicz factorization. Fails on the first non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<CholFactor> {
    let d = m.dim;
    let mut lower = vec![0.0; d * d];
    let mut log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= lower[i * d + k] * lower[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                let l = s.sqrt();
                lower[i * d + i] = l;
                log_det += 2.0 * l.ln();
            } else {
                lower[i * d + j] = s / lower[j * d + j];
            }
        }
    }
    Ok(CholFactor { dim: d, lower, log_det })
}

/// `(y − μ)ᵀ A⁻¹ (y − μ)` through a forward substitution with the factor of `A`.
pub fn mahalanobis_sq(y: &[f64], mu: &[f64], chol: &CholFactor) -> Result<f64> {
    check_dim(chol.dim, y.len())?;
    check_dim(chol.dim, mu.len())?;
    Ok(mahalanobis_sq_unchecked(y, mu, chol))
}

pub(crate) fn mahalanobis_sq_unchecked(y: &[f64], mu: &[f64], chol: &CholFactor) -> f64 {
    if chol.dim == 1 {
        let z = (y[0] - mu[0]) / chol.lower[0];
        return z * z;
    }
    let mut z: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    chol.forward_solve(&mut z);
    z.iter().map(|v| v * v).sum()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Column means of a flat row-major buffer with rows of length `dim`.
pub fn mean_rows(points: &[f64], dim: usize) -> Vec<f64> {
    let n = points.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in points.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a stream index into a seed; used to hand out independent child streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Seeded ChaCha8 stream. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream determined only by this stream's seed and `stream`,
    /// independent of how much of the parent has been consumed.
    pub fn child(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    /// Child stream seeded from the parent's current position.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
