//! Split-conformal scores, the augmented calibration quantile and the
//! per-input prediction sets for PCP, CP4Gen and HD-PCP.
//!
//! Every method follows the same two steps per input: fit a score model to
//! the ensemble ([`fit_score`]), then either evaluate it at the observed
//! response (calibration) or invert it at the calibrated threshold
//! (prediction). Reusing one [`FittedScore`] for both makes set membership
//! agree with `score(y) ≤ q̂`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::mixture::{fit_mixture, logmax_score, mixture_logdensity, CovStructure, MixtureFit};
use crate::numerics::{dist_sq, Rng};
use crate::setgeometry::{Ellipsoid, PredictionSet};

/// Slack applied when comparing `(1 − α)(N + 1)` against integer ranks, so
/// that decimal levels such as `α = 0.3` select the rank they denote.
pub const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cp4GenConfig {
    pub k: usize,
    pub beta_sq: f64,
    pub structure: CovStructure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdPcpConfig {
    pub keep_ratio: f64,
    /// Mixture fitted to the ensemble itself to rank member confidence.
    pub confidence: Cp4GenConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreMethod {
    Pcp,
    Cp4Gen(Cp4GenConfig),
    HdPcp(HdPcpConfig),
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Pcp => "pcp",
            ScoreMethod::Cp4Gen(_) => "cp4gen",
            ScoreMethod::HdPcp(_) => "hdpcp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScoreMethod::Pcp => Ok(()),
            ScoreMethod::Cp4Gen(c) => validate_cp4gen(c),
            ScoreMethod::HdPcp(h) => {
                if !(h.keep_ratio > 0.0 && h.keep_ratio <= 1.0) {
                    return Err(Error::InvalidParameter(format!("keep_ratio must lie in (0, 1], got {}", h.keep_ratio)));
                }
                validate_cp4gen(&h.confidence)
            }
        }
    }
}

fn validate_cp4gen(c: &Cp4GenConfig) -> Result<()> {
    if c.k < 1 {
        return Err(Error::InvalidParameter("CP4Gen needs K ≥ 1".into()));
    }
    if !(c.beta_sq > 0.0) {
        return Err(Error::InvalidParameter(format!("nugget β² must be positive, got {}", c.beta_sq)));
    }
    Ok(())
}

/// Sorted calibration scores and the conformal threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scores: Vec<f64>,
    pub alpha: f64,
    /// `+∞` when the rank exceeds the number of scores.
    pub q_hat: f64,
    pub n: usize,
}

/// Score model fitted to one ensemble.
#[derive(Debug, Clone)]
pub enum FittedScore {
    /// Minimum-distance score to (possibly filtered) members.
    Balls(Ensemble),
    Mixture(MixtureFit),
}

impl FittedScore {
    pub fn dim(&self) -> usize {
        match self {
            FittedScore::Balls(e) => e.dim(),
            FittedScore::Mixture(f) => f.dim(),
        }
    }

    pub fn score(&self, y: &[f64]) -> Result<f64> {
        match self {
            FittedScore::Balls(e) => pcp_score(e, y),
            FittedScore::Mixture(f) => Ok(logmax_score(f, y)?.0),
        }
    }

    /// `{y : score(y) ≤ q_hat}`.
    pub fn prediction_set(&self, q_hat: f64) -> Result<PredictionSet> {
        let dim = self.dim();
        if q_hat.is_nan() {
            return Err(Error::InvalidParameter("threshold is NaN".into()));
        }
        if q_hat == f64::INFINITY {
            return Ok(PredictionSet::everything(dim));
        }
        match self {
            FittedScore::Balls(e) => PredictionSet::balls(e.as_flat().to_vec(), dim, q_hat.max(0.0)),
            FittedScore::Mixture(fit) => {
                let pieces = (0..fit.len())
                    .filter_map(|k| {
                        let r = 2.0 * (q_hat - fit.offset(k));
                        (r > 0.0).then(|| Ellipsoid {
                            mean: fit.components[k].mean.clone(),
                            chol: fit.chols[k].clone(),
                            radius_sq: r,
                            component: k,
                        })
                    })
                    .collect();
                PredictionSet::ellipsoids(pieces, dim)
            }
        }
    }
}

/// `min_m ‖y − ŷ_m‖`.
pub fn pcp_score(ens: &Ensemble, y: &[f64]) -> Result<f64> {
    check_dim(ens.dim(), y.len())?;
    Ok(ens.members().map(|m| dist_sq(m, y)).fold(f64::INFINITY, f64::min).sqrt())
}

/// K-means, mixture fit and log-max score; the fit is returned for reuse.
pub fn cp4gen_score(ens: &Ensemble, y: &[f64], cfg: &Cp4GenConfig, rng: &mut Rng) -> Result<(f64, MixtureFit)> {
    let fit = fit_cp4gen(ens, cfg, rng)?;
    let (s, _) = logmax_score(&fit, y)?;
    Ok((s, fit))
}

pub fn fit_cp4gen(ens: &Ensemble, cfg: &Cp4GenConfig, rng: &mut Rng) -> Result<MixtureFit> {
    let clusters = kmeans(ens, cfg.k, rng)?;
    fit_mixture(&clusters, cfg.beta_sq, cfg.structure)
}

/// Keeps the `⌈ρM⌉` most confident members, preserving their original order.
pub fn hdpcp_filter<F>(ens: &Ensemble, confidence: F, keep_ratio: f64) -> Result<Ensemble>
where
    F: Fn(&[f64]) -> f64,
{
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!("keep_ratio must lie in (0, 1], got {keep_ratio}")));
    }
    let m = ens.len();
    let keep = ((keep_ratio * m as f64 - RANK_SLACK).ceil() as usize).clamp(1, m);
    if keep == m {
        return Ok(ens.clone());
    }
    let conf: Vec<f64> = ens.members().map(&confidence).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // stable: equal confidence keeps the earlier member first
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    ens.select(&kept)
}

/// Fits the score model of `method` to one ensemble.
pub fn fit_score(ens: &Ensemble, method: &ScoreMethod, rng: &mut Rng) -> Result<FittedScore> {
    match method {
        ScoreMethod::Pcp => Ok(FittedScore::Balls(ens.clone())),
        ScoreMethod::Cp4Gen(cfg) => Ok(FittedScore::Mixture(fit_cp4gen(ens, cfg, rng)?)),
        ScoreMethod::HdPcp(cfg) => {
            let conf_cfg = Cp4GenConfig { k: cfg.confidence.k.min(ens.len()), ..cfg.confidence };
            let fit = fit_cp4gen(ens, &conf_cfg, rng)?;
            let filtered = hdpcp_filter(ens, |y| mixture_logdensity(&fit, y).unwrap_or(f64::NEG_INFINITY), cfg.keep_ratio)?;
            Ok(FittedScore::Balls(filtered))
        }
    }
}

/// The `⌈(1 − α)(N + 1)⌉`-th smallest element of `scores ∪ {∞}`.
pub fn augmented_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_of_sorted(&sorted, alpha))
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let rank = (((1.0 - alpha) * (n + 1) as f64 - RANK_SLACK).ceil() as usize).max(1);
    if rank > n {
        f64::INFINITY
    } else {
        sorted[rank - 1]
    }
}

/// Conformal threshold from precomputed scores.
pub fn calibrate_scores(mut scores: Vec<f64>, alpha: f64) -> Result<CalibrationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("calibration score {i} is not finite")));
    }
    scores.sort_by(f64::total_cmp);
    let q_hat = quantile_of_sorted(&scores, alpha);
    let n = scores.len();
    Ok(CalibrationResult { scores, alpha, q_hat, n })
}

/// Scores every `(ensemble, response)` pair and computes the threshold.
/// Record `i` draws from child stream `i` of a fork of `rng`.
pub fn calibrate(records: &[(Ensemble, Vec<f64>)], method: &ScoreMethod, alpha: f64, rng: &mut Rng) -> Result<CalibrationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    method.validate()?;
    let dim = records.first().ok_or(Error::Empty("calibration records"))?.0.dim();
    let base = rng.fork();
    let scores = records
        .par_iter()
        .enumerate()
        .map(|(i, (ens, y))| {
            check_dim(dim, ens.dim())?;
            let mut r = base.child(i as u64);
            fit_score(ens, method, &mut r)?.score(y)
        })
        .collect::<Result<Vec<f64>>>()?;
    calibrate_scores(scores, alpha)
}

/// Prediction set for one input from its ensemble and a calibrated threshold.
pub fn predict_set(ens: &Ensemble, method: &ScoreMethod, q_hat: f64, rng: &mut Rng) -> Result<PredictionSet> {
    if q_hat == f64::INFINITY {
        return Ok(PredictionSet::everything(ens.dim()));
    }
    fit_score(ens, method, rng)?.prediction_set(q_hat)
}
