//! K-means++ segmentation of a point cloud into suction regions, with a
//! centroid and a camera-facing plane normal per region.

use std::collections::HashSet;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rgbd::PointCloud;
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("cannot cluster an empty point set")]
    Empty,
    #[error("k = {k} exceeds the {distinct} distinct points available")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("invalid clustering config: {0}")]
    InvalidConfig(String),
}

/// Why a region has no usable normal.
#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum NormalError {
    #[error("need at least 3 points for a plane fit")]
    TooFewPoints,
    #[error("points are collinear or the plane is seen edge-on")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Lloyd stops once no centroid moves by this many meters.
    pub convergence_eps: f64,
    pub rng_seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 15,
            max_iterations: 50,
            convergence_eps: 1e-4,
            rng_seed: 0,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), ClusteringError> {
        if self.k == 0 {
            return Err(ClusteringError::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(ClusteringError::InvalidConfig(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(ClusteringError::InvalidConfig(
                "convergence_eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub member_indices: Vec<usize>,
    pub centroid: Vec3,
    /// Unit, camera-facing; `None` marks the region as un-suctionable.
    pub normal: Option<Vec3>,
}

impl Cluster {
    pub fn is_suctionable(&self) -> bool {
        self.normal.is_some()
    }
}

/// Full Lloyd run, for callers that want the convergence trace.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub clusters: Vec<Cluster>,
    /// Cluster id of every input point.
    pub assignments: Vec<usize>,
    /// Inertia after each iteration's assignment + update.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansRun {
    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }
}

fn canonical_bits(p: &Vec3) -> [u64; 3] {
    // +0.0 folds -0.0 into the same key
    [(p.x + 0.0).to_bits(), (p.y + 0.0).to_bits(), (p.z + 0.0).to_bits()]
}

/// Counts distinct points, stopping early once `cap` is reached.
fn distinct_at_least(points: &[Vec3], cap: usize) -> usize {
    let mut seen = HashSet::new();
    for p in points {
        seen.insert(canonical_bits(p));
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

fn check_seedable(points: &[Vec3], k: usize) -> Result<(), ClusteringError> {
    if points.is_empty() {
        return Err(ClusteringError::Empty);
    }
    let distinct = distinct_at_least(points, k);
    if distinct < k {
        return Err(ClusteringError::TooFewDistinct { k, distinct });
    }
    Ok(())
}

/// D² seeding: first center uniform, each next one drawn with probability
/// proportional to the squared distance to the nearest chosen center.
pub fn kmeans_pp_seed<R: Rng + ?Sized>(
    points: &[Vec3],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec3>, ClusteringError> {
    if k == 0 {
        return Err(ClusteringError::InvalidConfig("k must be >= 1".into()));
    }
    check_seedable(points, k)?;
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = Some(i);
                break;
            }
            target -= w;
        }
        // rounding can walk off the end; fall back to the last positive weight
        let idx = pick
            .or_else(|| d2.iter().rposition(|&w| w > 0.0))
            .ok_or(ClusteringError::TooFewDistinct {
                k,
                distinct: centers.len(),
            })?;
        let c = points[idx];
        centers.push(c);
        for (w, p) in d2.iter_mut().zip(points) {
            let d = (p - c).norm_squared();
            if d < *w {
                *w = d;
            }
        }
    }
    Ok(centers)
}

/// Arithmetic mean of the members.
pub fn compute_centroid(members: &[Vec3]) -> Result<Vec3, ClusteringError> {
    if members.is_empty() {
        return Err(ClusteringError::Empty);
    }
    let sum = members.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Ok(sum / members.len() as f64)
}

fn nearest(p: &Vec3, centers: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        // strict: lowest id wins ties
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// K-means++ seeded Lloyd iterations. Normals are left unset.
pub fn kmeans(points: &PointCloud, cfg: &ClusteringConfig) -> Result<Vec<Cluster>, ClusteringError> {
    Ok(kmeans_run(&points.points, cfg)?.clusters)
}

pub fn kmeans_run(points: &[Vec3], cfg: &ClusteringConfig) -> Result<KMeansRun, ClusteringError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut centers = kmeans_pp_seed(points, cfg.k, &mut rng)?;
    let k = cfg.k;
    let n = points.len();
    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centers);
            assignments[i] = j;
            sums[j] += p;
            counts[j] += 1;
        }

        // Empty clusters take the farthest member of the largest cluster.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let largest = (0..k).fold(0, |best, j| if counts[j] > counts[best] { j } else { best });
            let mean = sums[largest] / counts[largest] as f64;
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if assignments[i] == largest {
                    let d = (p - mean).norm_squared();
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
            }
            let i = far.expect("largest cluster has members");
            assignments[i] = empty;
            sums[largest] -= points[i];
            counts[largest] -= 1;
            sums[empty] = points[i];
            counts[empty] = 1;
        }

        let mut max_shift: f64 = 0.0;
        for j in 0..k {
            let c = sums[j] / counts[j] as f64;
            max_shift = max_shift.max((c - centers[j]).norm());
            centers[j] = c;
        }
        let inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &j)| (p - centers[j]).norm_squared())
            .sum();
        inertia_trace.push(inertia);
        if max_shift < cfg.convergence_eps {
            break;
        }
    }

    let mut members = vec![Vec::new(); k];
    for (i, &j) in assignments.iter().enumerate() {
        members[j].push(i);
    }
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(id, member_indices)| {
            let pts: Vec<Vec3> = member_indices.iter().map(|&i| points[i]).collect();
            Cluster {
                id,
                centroid: compute_centroid(&pts).expect("clusters are repaired to be non-empty"),
                member_indices,
                normal: None,
            }
        })
        .collect();
    Ok(KMeansRun {
        clusters,
        assignments,
        inertia_trace,
        iterations,
    })
}

/// Smallest-eigenvalue eigenvector of the member scatter about `centroid`,
/// flipped to face the camera origin.
pub fn estimate_normal(members: &[Vec3], centroid: &Vec3) -> Result<Vec3, NormalError> {
    let (normal, _) = plane_fit(members, centroid)?;
    let facing = normal.dot(&-centroid);
    if facing.abs() <= 1e-12 * centroid.norm().max(1e-12) {
        return Err(NormalError::Degenerate);
    }
    Ok(if facing > 0.0 { normal } else { -normal })
}

/// Least-squares plane through `origin`: (unit normal, rms residual).
/// The normal's sign is arbitrary.
pub fn plane_fit(members: &[Vec3], origin: &Vec3) -> Result<(Vec3, f64), NormalError> {
    if members.len() < 3 {
        return Err(NormalError::TooFewPoints);
    }
    let mut cov = Matrix3::zeros();
    for p in members {
        let d = p - origin;
        cov += d * d.transpose();
    }
    cov /= members.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(hi > 0.0) || mid <= 1e-12 * hi {
        return Err(NormalError::Degenerate);
    }
    let n = eig.eigenvectors.column(order[0]).into_owned();
    let norm = n.norm();
    if !(norm > 0.0) {
        return Err(NormalError::Degenerate);
    }
    Ok((n / norm, lo.sqrt()))
}

/// Clusters `cloud` and attaches a normal to every region that admits one.
pub fn segment(cloud: &PointCloud, cfg: &ClusteringConfig) -> Result<Vec<Cluster>, ClusteringError> {
    let mut clusters = kmeans(cloud, cfg)?;
    for c in &mut clusters {
        let pts: Vec<Vec3> = c.member_indices.iter().map(|&i| cloud.points[i]).collect();
        c.normal = estimate_normal(&pts, &c.centroid).ok();
    }
    Ok(clusters)
}
