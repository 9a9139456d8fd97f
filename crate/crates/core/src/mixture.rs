//! Regularized Gaussian mixture built from K-means clusters, and the
//! log-max / log-sum negative log-density scores evaluated on it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterStats;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cholesky, mahalanobis_sq_unchecked, sample_covariance, CholFactor};

/// Covariance structure kept from each cluster before the nugget is added.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    #[default]
    Full,
    Diagonal,
}

impl std::str::FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "diagonal" | "diag" => Ok(Self::Diagonal),
            other => Err(Error::InvalidParameter(format!("unknown covariance structure `{other}`"))),
        }
    }
}

/// A weighted Gaussian mixture whose component covariances are
/// `Σ_k + β²I` (or `diag(Σ_k) + β²I`), factored once at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub components: Vec<ClusterStats>,
    pub nugget_beta_sq: f64,
    pub structure: CovStructure,
    pub chols: Vec<CholFactor>,
    dim: usize,
    /// `−log w_k + (d/2) log 2π + ½ log det Σ̃_k`.
    offsets: Vec<f64>,
}

pub fn fit_mixture(clusters: &[ClusterStats], beta_sq: f64, structure: CovStructure) -> Result<MixtureFit> {
    if !(beta_sq > 0.0) || !beta_sq.is_finite() {
        return Err(Error::InvalidParameter(format!("nugget β² must be positive, got {beta_sq}")));
    }
    let first = clusters.first().ok_or(Error::Empty("mixture components"))?;
    let dim = first.mean.len();
    let half_log_2pi = 0.5 * dim as f64 * (2.0 * PI).ln();
    let mut chols = Vec::with_capacity(clusters.len());
    let mut offsets = Vec::with_capacity(clusters.len());
    for c in clusters {
        check_dim(dim, c.mean.len())?;
        check_dim(dim, c.cov.dim())?;
        let base = match structure {
            CovStructure::Full => c.cov.clone(),
            CovStructure::Diagonal => c.cov.diagonal_part(),
        };
        let regularized = base.add_diagonal(beta_sq);
        let chol = match cholesky(&regularized) {
            Ok(ch) => ch,
            Err(_) => {
                let mut sym = regularized;
                sym.symmetrize();
                cholesky(&sym)?
            }
        };
        offsets.push(-c.weight.ln() + half_log_2pi + 0.5 * chol.log_det());
        chols.push(chol);
    }
    Ok(MixtureFit {
        components: clusters.to_vec(),
        nugget_beta_sq: beta_sq,
        structure,
        chols,
        dim,
        offsets,
    })
}

impl MixtureFit {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Score floor of component `k`: its score at its own mean.
    pub fn offset(&self, k: usize) -> f64 {
        self.offsets[k]
    }

    /// Component-wise negative log of `w_k N(y; μ_k, Σ̃_k)`.
    pub fn component_score(&self, k: usize, y: &[f64]) -> f64 {
        self.offsets[k] + 0.5 * mahalanobis_sq_unchecked(y, &self.components[k].mean, &self.chols[k])
    }
}

/// `−log max_k w_k N(y; μ_k, Σ_k + β²I)` together with the maximizing component.
pub fn logmax_score(fit: &MixtureFit, y: &[f64]) -> Result<(f64, usize)> {
    check_dim(fit.dim, y.len())?;
    let mut best = (f64::INFINITY, 0);
    for k in 0..fit.len() {
        let s = fit.component_score(k, y);
        if s < best.0 {
            best = (s, k);
        }
    }
    Ok(best)
}

/// `log Σ_k w_k N(y; μ_k, Σ_k + β²I)`, the nugget applied as in the log-max score.
pub fn mixture_logdensity(fit: &MixtureFit, y: &[f64]) -> Result<f64> {
    check_dim(fit.dim, y.len())?;
    let terms: Vec<f64> = (0..fit.len()).map(|k| -fit.component_score(k, y)).collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Ok(top);
    }
    let sum: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    Ok(top + sum.ln())
}

/// Default nugget: `1e-4 · trace(Cov(responses)) / d`; falls back to `1e-4`
/// when the responses have no spread.
pub fn default_beta_sq(responses: &[f64], dim: usize) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Empty("responses for nugget"));
    }
    let mean = crate::numerics::mean_rows(responses, dim);
    let cov = sample_covariance(responses, &mean)?;
    let v = 1e-4 * cov.trace() / dim as f64;
    Ok(if v > 0.0 && v.is_finite() { v } else { 1e-4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SymMatrix;
    use proptest::prelude::*;

    const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

    fn comp(weight: f64, mean: Vec<f64>, cov: SymMatrix) -> ClusterStats {
        ClusterStats { weight, mean, cov, size: 1 }
    }

    fn unit_1d() -> MixtureFit {
        // 1 + 1e-300 rounds to 1
        let beta = 1e-300;
        fit_mixture(&[comp(1.0, vec![0.0], SymMatrix::identity(1))], beta, CovStructure::Full).unwrap()
    }

    #[test]
    fn nugget_must_be_positive() {
        let c = [comp(1.0, vec![0.0], SymMatrix::zeros(1))];
        assert!(fit_mixture(&c, 0.0, CovStructure::Full).is_err());
        assert!(fit_mixture(&c, -1.0, CovStructure::Full).is_err());
    }

    #[test]
    fn singleton_gets_nugget_only() {
        let fit = fit_mixture(&[comp(1.0, vec![0.0, 0.0], SymMatrix::zeros(2))], 0.01, CovStructure::Full).unwrap();
        assert!(fit.chols[0].reconstruct().rel_frobenius_error(&SymMatrix::scaled_identity(2, 0.01)) < 1e-15);
        assert!((fit.chols[0].log_det() - 2.0 * 0.01f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nugget_shifts_eigenvalues() {
        let cov = SymMatrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let fit = fit_mixture(&[comp(1.0, vec![0.0, 0.0], cov)], 1e-4, CovStructure::Full).unwrap();
        let expected_det: f64 = (0.1 + 1e-4) * (1.9 + 1e-4);
        assert!((fit.chols[0].log_det() - expected_det.ln()).abs() < 1e-10);
        let m = fit.chols[0].reconstruct();
        assert!((m.trace() - (2.0 + 2e-4)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_structure_drops_correlation() {
        let cov = SymMatrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let b = 1e-4;
        let fit = fit_mixture(&[comp(1.0, vec![0.0, 0.0], cov)], b, CovStructure::Diagonal).unwrap();
        let expected = SymMatrix::from_rows(&[vec![1.0 + b, 0.0], vec![0.0, 1.0 + b]]).unwrap();
        assert!(fit.chols[0].reconstruct().rel_frobenius_error(&expected) < 1e-15);
    }

    #[test]
    fn standard_normal_scores() {
        let fit = unit_1d();
        let (s0, k) = logmax_score(&fit, &[0.0]).unwrap();
        assert_eq!(k, 0);
        assert!((s0 - HALF_LOG_2PI).abs() < 1e-12);
        let (s1, _) = logmax_score(&fit, &[1.0]).unwrap();
        assert!((s1 - (HALF_LOG_2PI + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_component_adds_log_two() {
        let one = unit_1d();
        let c = comp(0.5, vec![0.0], SymMatrix::identity(1));
        let two = fit_mixture(&[c.clone(), c], 1e-300, CovStructure::Full).unwrap();
        for y in [-1.3, 0.0, 0.4, 2.5] {
            let a = logmax_score(&one, &[y]).unwrap().0;
            let b = logmax_score(&two, &[y]).unwrap().0;
            assert!((b - a - 2f64.ln()).abs() < 1e-12);
            // log-sum recovers the single component
            let ls = mixture_logdensity(&two, &[y]).unwrap();
            assert!((ls + a).abs() < 1e-12);
        }
    }

    #[test]
    fn logsum_equals_logmax_for_one_component() {
        let fit = unit_1d();
        for y in [-2.0, 0.3, 5.0] {
            assert_eq!(mixture_logdensity(&fit, &[y]).unwrap(), -logmax_score(&fit, &[y]).unwrap().0);
        }
    }

    #[test]
    fn logsum_close_to_logmax_for_separated_components() {
        let c1 = comp(0.5, vec![0.0, 0.0], SymMatrix::identity(2));
        let c2 = comp(0.5, vec![50.0, 0.0], SymMatrix::identity(2));
        let fit = fit_mixture(&[c1, c2], 1e-6, CovStructure::Full).unwrap();
        let ls = mixture_logdensity(&fit, &[0.0, 0.0]).unwrap();
        let lm = logmax_score(&fit, &[0.0, 0.0]).unwrap().0;
        assert!((ls + lm).abs() < 1e-9);
    }

    #[test]
    fn dimension_checked() {
        assert!(logmax_score(&unit_1d(), &[0.0, 1.0]).is_err());
    }

    fn random_fit(k: usize, params: &[f64]) -> MixtureFit {
        let mut comps = Vec::new();
        let raw: Vec<f64> = (0..k).map(|i| 0.1 + params[i].abs()).collect();
        let total: f64 = raw.iter().sum();
        for i in 0..k {
            let p = &params[k + 4 * i..k + 4 * i + 4];
            let cov = SymMatrix::from_rows(&[vec![p[2] * p[2], 0.0], vec![0.0, p[3] * p[3]]]).unwrap();
            comps.push(comp(raw[i] / total, vec![3.0 * p[0], 3.0 * p[1]], cov));
        }
        fit_mixture(&comps, 0.05, CovStructure::Full).unwrap()
    }

    proptest! {
        #[test]
        fn logsum_logmax_gap_is_bounded(
            k in 1usize..6,
            params in prop::collection::vec(-2.0f64..2.0, 30),
            y in prop::collection::vec(-8.0f64..8.0, 2),
        ) {
            let fit = random_fit(k, &params);
            let gap = mixture_logdensity(&fit, &y).unwrap() + logmax_score(&fit, &y).unwrap().0;
            prop_assert!(gap >= -1e-12);
            prop_assert!(gap <= (k as f64).ln() + 1e-12);
        }

        #[test]
        fn common_weight_scaling_keeps_argmin(
            k in 1usize..6,
            params in prop::collection::vec(-2.0f64..2.0, 30),
            y in prop::collection::vec(-8.0f64..8.0, 2),
            factor in 0.01f64..100.0,
        ) {
            let fit = random_fit(k, &params);
            let scaled: Vec<ClusterStats> = fit.components.iter().map(|c| {
                let mut c = c.clone();
                c.weight *= factor;
                c
            }).collect();
            let refit = fit_mixture(&scaled, fit.nugget_beta_sq, fit.structure).unwrap();
            let (a, ia) = logmax_score(&fit, &y).unwrap();
            let (b, ib) = logmax_score(&refit, &y).unwrap();
            prop_assert_eq!(ia, ib);
            prop_assert!((a - factor.ln() - b).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn score_is_continuous_along_lines(
            params in prop::collection::vec(-2.0f64..2.0, 30),
            y in prop::collection::vec(-4.0f64..4.0, 2),
            dir in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let fit = random_fit(3, &params);
            let at = |t: f64| logmax_score(&fit, &[y[0] + t * dir[0], y[1] + t * dir[1]]).unwrap().0;
            prop_assert!((at(1e-7) - at(0.0)).abs() < 1e-2);
            let h = 1e-3;
            // second difference vanishes within a quadratic piece only up to the curvature
            let (_, k0) = logmax_score(&fit, &y).unwrap();
            let same_piece = [-h, h].iter().all(|&t| {
                logmax_score(&fit, &[y[0] + t * dir[0], y[1] + t * dir[1]]).unwrap().1 == k0
            });
            if same_piece {
                let second = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
                let m = &fit.chols[k0].reconstruct();
                // dᵀ Σ̃⁻¹ d bounded by |d|² / λ_min ≤ |d|² / β²
                let bound = (dir[0] * dir[0] + dir[1] * dir[1]) / fit.nugget_beta_sq;
                prop_assert!(second > -1e-2 && second <= bound + 1e-2 * bound.max(1.0), "{second} {m:?}");
            }
        }
    }
}
