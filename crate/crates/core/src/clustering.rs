//! Seeded K-means over an ensemble: k-means++ seeding, Lloyd iterations and
//! per-cluster weight/mean/covariance from the final hard assignment.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dist_sq, sample_covariance, Rng, SymMatrix};

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-6;

/// `M` generated responses of dimension `d` for a single input, stored
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    dim: usize,
    data: Vec<f64>,
}

impl Ensemble {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("ensemble dimension must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, got: data.len() % dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("ensemble members must be finite".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_members(members: &[Vec<f64>]) -> Result<Self> {
        let dim = members.first().map(Vec::len).ok_or(Error::Empty("ensemble"))?;
        let mut data = Vec::with_capacity(dim * members.len());
        for m in members {
            check_dim(dim, m.len())?;
            data.extend_from_slice(m);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn members(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Sub-ensemble with the members at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.member(i));
        }
        Self::new(self.dim, data)
    }
}

/// One hard cluster of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// `size / M`.
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub size: usize,
}

/// Full K-means result, including the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub clusters: Vec<ClusterStats>,
    /// Cluster index of each member, indexing into `clusters`.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(ens: &Ensemble, k: usize, rng: &mut Rng) -> Result<Vec<ClusterStats>> {
    Ok(kmeans_detailed(ens, k, rng)?.clusters)
}

pub fn kmeans_detailed(ens: &Ensemble, k: usize, rng: &mut Rng) -> Result<KMeansOutcome> {
    let m = ens.len();
    if k < 1 || k > m {
        return Err(Error::InvalidClusterCount { k, m });
    }
    let seeds = kmeanspp_seeds(ens, k, rng);
    lloyd(ens, &seeds)
}

/// Indices of `k` distinct members chosen by D² sampling.
pub fn kmeanspp_seeds(ens: &Ensemble, k: usize, rng: &mut Rng) -> Vec<usize> {
    let m = ens.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.index(m));
    let mut d2: Vec<f64> = ens.members().map(|p| dist_sq(p, ens.member(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // all remaining points coincide with a seed
            let free: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
            free[rng.index(free.len())]
        };
        chosen.push(next);
        let c = ens.member(next);
        for (i, p) in ens.members().enumerate() {
            d2[i] = d2[i].min(dist_sq(p, c));
        }
    }
    chosen
}

/// Lloyd iterations from the given seed members.
pub fn lloyd(ens: &Ensemble, seed_members: &[usize]) -> Result<KMeansOutcome> {
    let centroids: Vec<f64> = seed_members.iter().flat_map(|&i| ens.member(i).to_vec()).collect();
    lloyd_from_centroids(ens, centroids)
}

/// Lloyd iterations from explicit initial centroids (`k × d`, row-major).
pub fn lloyd_from_centroids(ens: &Ensemble, mut centroids: Vec<f64>) -> Result<KMeansOutcome> {
    let d = ens.dim();
    let m = ens.len();
    if centroids.is_empty() || centroids.len() % d != 0 {
        return Err(Error::InvalidParameter("initial centroids do not match ensemble dimension".into()));
    }
    let k = centroids.len() / d;
    if k > m {
        return Err(Error::InvalidClusterCount { k, m });
    }
    let mut assignments = vec![0usize; m];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        assign(ens, &centroids, &mut assignments);
        empty_cluster_repair(ens, &centroids, &mut assignments);
        let updated = update_centroids(ens, &assignments, &centroids);
        let shift = updated
            .chunks_exact(d)
            .zip(centroids.chunks_exact(d))
            .map(|(a, b)| dist_sq(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        objective.push(within_ss(ens, &centroids, &assignments));
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let (clusters, assignments) = cluster_stats(ens, &assignments, k)?;
    Ok(KMeansOutcome { clusters, assignments, objective, iterations })
}

/// Nearest-centroid assignment; the lowest cluster index wins ties.
fn assign(ens: &Ensemble, centroids: &[f64], assignments: &mut [usize]) {
    let d = ens.dim();
    for (a, p) in assignments.iter_mut().zip(ens.members()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.chunks_exact(d).enumerate() {
            let dd = dist_sq(p, c);
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        *a = best;
    }
}

/// Hands each empty cluster the point farthest from its own centroid, taking
/// only from clusters with more than one member. Stops when no cluster is
/// empty or no point can move.
pub fn empty_cluster_repair(ens: &Ensemble, centroids: &[f64], assignments: &mut [usize]) {
    let d = ens.dim();
    let k = centroids.len() / d;
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in ens.members().enumerate() {
            let own = assignments[i];
            if sizes[own] < 2 {
                continue;
            }
            let dd = dist_sq(p, &centroids[own * d..(own + 1) * d]);
            if far.is_none_or(|(_, best)| dd > best) {
                far = Some((i, dd));
            }
        }
        let Some((i, _)) = far else { break };
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] += 1;
    }
}

fn update_centroids(ens: &Ensemble, assignments: &[usize], previous: &[f64]) -> Vec<f64> {
    let d = ens.dim();
    let k = previous.len() / d;
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (p, &a) in ens.members().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            sums[j * d..(j + 1) * d].copy_from_slice(&previous[j * d..(j + 1) * d]);
        } else {
            for s in &mut sums[j * d..(j + 1) * d] {
                *s /= counts[j] as f64;
            }
        }
    }
    sums
}

fn within_ss(ens: &Ensemble, centroids: &[f64], assignments: &[usize]) -> f64 {
    let d = ens.dim();
    ens.members()
        .zip(assignments)
        .map(|(p, &a)| dist_sq(p, &centroids[a * d..(a + 1) * d]))
        .sum()
}

/// Statistics of the non-empty clusters, with assignments relabelled to
/// index the returned list.
fn cluster_stats(ens: &Ensemble, assignments: &[usize], k: usize) -> Result<(Vec<ClusterStats>, Vec<usize>)> {
    let d = ens.dim();
    let m = ens.len();
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (p, &a) in ens.members().zip(assignments) {
        groups[a].extend_from_slice(p);
    }
    let mut relabel = vec![usize::MAX; k];
    let mut clusters = Vec::with_capacity(k);
    for (j, pts) in groups.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let size = pts.len() / d;
        let mean = crate::numerics::mean_rows(pts, d);
        let cov = sample_covariance(pts, &mean)?;
        relabel[j] = clusters.len();
        clusters.push(ClusterStats { weight: size as f64 / m as f64, mean, cov, size });
    }
    let assignments = assignments.iter().map(|&a| relabel[a]).collect();
    Ok((clusters, assignments))
}
