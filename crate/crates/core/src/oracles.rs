//! Brute-force and closed-form references used to check the pipeline.

use statrs::function::gamma::{gamma, gamma_lr};

use crate::conformal::RANK_SLACK;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cholesky, mahalanobis_sq, CholFactor, SymMatrix};

const CHI2_TOLERANCE: f64 = 1e-10;

/// Smallest candidate `x` in `scores ∪ {∞}` whose count of augmented values
/// `≤ x` reaches `(1−α)(N+1)`, found by trying every candidate in turn.
pub fn quantile_bruteforce(scores: &[f64], alpha: f64) -> f64 {
    let mut candidates = scores.to_vec();
    candidates.push(f64::INFINITY);
    let need = (1.0 - alpha) * candidates.len() as f64 - RANK_SLACK;
    let mut best = f64::INFINITY;
    for &x in &candidates {
        let count = candidates.iter().filter(|&&s| s <= x).count();
        if count as f64 >= need && x < best {
            best = x;
        }
    }
    best
}

/// Inverse CDF of the chi-square distribution with `d` degrees of freedom.
pub fn chi2_inverse_cdf(d: usize, p: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidParameter("chi-square needs at least one degree of freedom".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability must lie in (0, 1), got {p}")));
    }
    let a = d as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let mut hi = d as f64 + 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > CHI2_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lebesgue measure of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::PI.powf(h) / gamma(h + 1.0)
}

/// The `1−α` highest-density ellipsoid of `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianHDSet {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub alpha: f64,
    pub chi2_quantile: f64,
    chol: CholFactor,
}

impl GaussianHDSet {
    pub fn new(mean: Vec<f64>, cov: SymMatrix, alpha: f64) -> Result<Self> {
        check_dim(cov.dim(), mean.len())?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidAlpha(alpha));
        }
        let chol = cholesky(&cov)?;
        let chi2_quantile = chi2_inverse_cdf(mean.len(), 1.0 - alpha)?;
        Ok(Self { mean, cov, alpha, chi2_quantile, chol })
    }

    pub fn volume(&self) -> f64 {
        let d = self.mean.len();
        unit_ball_volume(d) * (0.5 * self.chol.log_det()).exp() * self.chi2_quantile.powf(d as f64 / 2.0)
    }

    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        Ok(mahalanobis_sq(y, &self.mean, &self.chol)? <= self.chi2_quantile)
    }
}

pub fn gaussian_hd_volume(mean: &[f64], cov: &SymMatrix, alpha: f64) -> Result<f64> {
    Ok(GaussianHDSet::new(mean.to_vec(), cov.clone(), alpha)?.volume())
}

/// Fraction of `test_scores` at or below the brute-force threshold of
/// `calib_scores`.
pub fn coverage_enumeration(calib_scores: &[f64], test_scores: &[f64], alpha: f64) -> f64 {
    if test_scores.is_empty() {
        return f64::NAN;
    }
    let q = quantile_bruteforce(calib_scores, alpha);
    test_scores.iter().filter(|&&s| s <= q).count() as f64 / test_scores.len() as f64
}
