//! Prediction sets as unions of balls or ellipsoids, and the metrics computed
//! on them: membership, volume (exact in 1-d, Monte Carlo otherwise) and
//! structural complexity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dist_sq, mahalanobis_sq_unchecked, CholFactor, Rng};

/// Samples per Monte Carlo batch; each batch draws from its own child stream.
const MC_BATCH: usize = 16_384;

/// `{y : (y − μ)ᵀ Σ̃⁻¹ (y − μ) ≤ r}` with `r > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub mean: Vec<f64>,
    pub chol: CholFactor,
    pub radius_sq: f64,
    /// Mixture component the piece came from.
    pub component: usize,
}

impl Ellipsoid {
    pub fn contains(&self, y: &[f64]) -> bool {
        mahalanobis_sq_unchecked(y, &self.mean, &self.chol) <= self.radius_sq
    }

    /// Half-width of the axis-aligned bounding box along axis `j`.
    pub fn half_width(&self, j: usize) -> f64 {
        (self.radius_sq * self.chol.matrix_diag(j)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SetShape {
    /// Equal-radius closed balls; `centers` is row-major.
    Balls { centers: Vec<f64>, radius: f64 },
    Ellipsoids { pieces: Vec<Ellipsoid> },
    /// Produced by an infinite threshold: contains every point.
    Everything,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub shape: SetShape,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_samples: usize,
    pub exact: bool,
}

impl VolumeEstimate {
    fn exact(value: f64) -> Self {
        Self { value, std_err: 0.0, n_samples: 0, exact: true }
    }

    pub fn unbounded() -> Self {
        Self { value: f64::INFINITY, std_err: 0.0, n_samples: 0, exact: false }
    }

    pub fn is_unbounded(&self) -> bool {
        self.value.is_infinite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    /// Number of non-empty convex pieces.
    pub pieces: usize,
    /// Disjoint intervals after merging; only computed for 1-d sets.
    pub disjoint: Option<usize>,
}

impl PredictionSet {
    pub fn balls(centers: Vec<f64>, dim: usize, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidParameter(format!("ball radius must be non-negative, got {radius}")));
        }
        if dim == 0 || centers.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, got: centers.len() });
        }
        Ok(Self { shape: SetShape::Balls { centers, radius }, dim })
    }

    pub fn ellipsoids(pieces: Vec<Ellipsoid>, dim: usize) -> Result<Self> {
        for p in &pieces {
            check_dim(dim, p.mean.len())?;
            if !(p.radius_sq > 0.0) {
                return Err(Error::InvalidParameter("ellipsoid threshold must be positive".into()));
            }
        }
        Ok(Self { shape: SetShape::Ellipsoids { pieces }, dim })
    }

    pub fn everything(dim: usize) -> Self {
        Self { shape: SetShape::Everything, dim }
    }

    pub fn is_everything(&self) -> bool {
        matches!(self.shape, SetShape::Everything)
    }

    /// Closed-set membership.
    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        check_dim(self.dim, y.len())?;
        Ok(self.contains_unchecked(y))
    }

    fn contains_unchecked(&self, y: &[f64]) -> bool {
        match &self.shape {
            SetShape::Balls { centers, radius } => {
                let r2 = radius * radius;
                centers.chunks_exact(self.dim).any(|c| dist_sq(y, c) <= r2)
            }
            SetShape::Ellipsoids { pieces } => pieces.iter().any(|p| p.contains(y)),
            SetShape::Everything => true,
        }
    }

    /// The 1-d pieces as unmerged `[lo, hi]` intervals.
    pub fn intervals(&self) -> Result<Vec<(f64, f64)>> {
        check_dim(1, self.dim)?;
        match &self.shape {
            SetShape::Balls { centers, radius } => Ok(centers.iter().map(|c| (c - radius, c + radius)).collect()),
            SetShape::Ellipsoids { pieces } => Ok(pieces
                .iter()
                .map(|p| {
                    let h = p.half_width(0);
                    (p.mean[0] - h, p.mean[0] + h)
                })
                .collect()),
            SetShape::Everything => Err(Error::InvalidParameter("unbounded set has no intervals".into())),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)` of the union, `None` when empty
    /// or unbounded.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        let mut any = false;
        match &self.shape {
            SetShape::Balls { centers, radius } => {
                for c in centers.chunks_exact(d) {
                    any = true;
                    for j in 0..d {
                        lo[j] = lo[j].min(c[j] - radius);
                        hi[j] = hi[j].max(c[j] + radius);
                    }
                }
            }
            SetShape::Ellipsoids { pieces } => {
                for p in pieces {
                    any = true;
                    for j in 0..d {
                        let h = p.half_width(j);
                        lo[j] = lo[j].min(p.mean[j] - h);
                        hi[j] = hi[j].max(p.mean[j] + h);
                    }
                }
            }
            SetShape::Everything => return None,
        }
        any.then_some((lo, hi))
    }
}

/// Sorts and merges overlapping (touching) intervals.
pub fn merge_intervals(mut intervals: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for (lo, hi) in intervals {
        match merged.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged
}

/// Exact length of a 1-d union.
pub fn volume_1d(set: &PredictionSet) -> Result<VolumeEstimate> {
    check_dim(1, set.dim)?;
    if set.is_everything() {
        return Ok(VolumeEstimate::unbounded());
    }
    let total = merge_intervals(set.intervals()?).iter().map(|(lo, hi)| hi - lo).sum();
    Ok(VolumeEstimate::exact(total))
}

/// Hit-or-miss Monte Carlo in the bounding box of the union.
pub fn volume_mc(set: &PredictionSet, n: usize, rng: &mut Rng) -> Result<VolumeEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameter("Monte Carlo volume needs at least one sample".into()));
    }
    if set.is_everything() {
        return Ok(VolumeEstimate::unbounded());
    }
    let Some((lo, hi)) = set.bounding_box() else {
        return Ok(VolumeEstimate { value: 0.0, std_err: 0.0, n_samples: n, exact: false });
    };
    let widths: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
    let box_volume: f64 = widths.iter().product();
    if !(box_volume > 0.0) {
        return Ok(VolumeEstimate { value: 0.0, std_err: 0.0, n_samples: n, exact: false });
    }
    let base = rng.fork();
    let batches = n.div_ceil(MC_BATCH);
    let hits: usize = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = base.child(b as u64);
            let count = MC_BATCH.min(n - b * MC_BATCH);
            let mut y = vec![0.0; set.dim];
            let mut h = 0usize;
            for _ in 0..count {
                for j in 0..set.dim {
                    y[j] = lo[j] + widths[j] * r.uniform();
                }
                if set.contains_unchecked(&y) {
                    h += 1;
                }
            }
            h
        })
        .sum();
    let p = hits as f64 / n as f64;
    Ok(VolumeEstimate {
        value: box_volume * p,
        std_err: box_volume * (p * (1.0 - p) / n as f64).sqrt(),
        n_samples: n,
        exact: false,
    })
}

/// Exact volume in 1-d, Monte Carlo with `mc_samples` otherwise.
pub fn volume(set: &PredictionSet, mc_samples: usize, rng: &mut Rng) -> Result<VolumeEstimate> {
    if set.dim == 1 {
        volume_1d(set)
    } else {
        volume_mc(set, mc_samples, rng)
    }
}

/// Piece count, plus the merged interval count for 1-d sets. `None` for the
/// unbounded set.
pub fn structural_complexity(set: &PredictionSet) -> Option<Complexity> {
    let pieces = match &set.shape {
        SetShape::Balls { centers, .. } => centers.len() / set.dim,
        SetShape::Ellipsoids { pieces } => pieces.len(),
        SetShape::Everything => return None,
    };
    let disjoint = if set.dim == 1 {
        set.intervals().ok().map(|iv| merge_intervals(iv).len())
    } else {
        None
    };
    Some(Complexity { pieces, disjoint })
}
