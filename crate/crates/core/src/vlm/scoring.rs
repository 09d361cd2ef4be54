//! Geometric suction-quality scores and the deterministic oracle decider.

use std::f64::consts::TAU;

use crate::clustering::plane_fit;
use crate::projection::SuctionCandidate;
use crate::rgbd::{PixelMask, PointCloud};
use crate::Vec3;

use super::{Decider, Decision, GeometricScores, OracleConfig, Query, Refusal, VlmDecision, VlmError};

/// Where the cup comes from: `origin` and the unit approach direction.
/// In the camera frame this is the camera center looking down +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringFrame {
    pub origin: Vec3,
    pub forward: Vec3,
}

impl ScoringFrame {
    pub fn camera() -> Self {
        Self {
            origin: Vec3::zeros(),
            forward: Vec3::z(),
        }
    }
}

/// Scores a candidate in the camera frame.
pub fn score_candidate(c: &SuctionCandidate, cloud: &PointCloud, params: &OracleConfig) -> GeometricScores {
    score_candidate_in(
        &c.point_camera,
        &c.normal_camera,
        &cloud.points,
        &ScoringFrame::camera(),
        params,
    )
}

/// Frame-agnostic scoring; invariant under a rigid motion applied jointly
/// to the point, normal, cloud and frame.
pub fn score_candidate_in(
    point: &Vec3,
    normal: &Vec3,
    cloud: &[Vec3],
    frame: &ScoringFrame,
    params: &OracleConfig,
) -> GeometricScores {
    let r = params.cup_radius;
    let patch: Vec<Vec3> = cloud
        .iter()
        .filter(|p| (*p - point).norm() <= r)
        .copied()
        .collect();

    let flatness = flatness(&patch, params.sigma_flat);
    let perpendicularity = normal.dot(&-frame.forward).clamp(0.0, 1.0);
    let accessibility = accessibility(point, cloud, frame, r);
    let stability = disk_coverage(point, normal, cloud, r);

    let w = &params.weights;
    let total = w.flatness * flatness
        + w.perpendicularity * perpendicularity
        + w.accessibility * accessibility
        + w.stability * stability;
    GeometricScores {
        flatness,
        accessibility,
        perpendicularity,
        stability,
        total: total.clamp(0.0, 1.0),
    }
}

fn flatness(patch: &[Vec3], sigma: f64) -> f64 {
    if patch.len() < 3 {
        return 0.0;
    }
    let mean = patch.iter().fold(Vec3::zeros(), |a, p| a + p) / patch.len() as f64;
    match plane_fit(patch, &mean) {
        Ok((_, rms)) => (-rms / sigma).exp(),
        Err(_) => 0.0,
    }
}

/// 1 when the cylinder of radius `r` from the approach origin to the
/// target holds no points in front of the target patch; otherwise falls
/// linearly with the deepest lateral intrusion.
fn accessibility(point: &Vec3, cloud: &[Vec3], frame: &ScoringFrame, r: f64) -> f64 {
    let to_target = point - frame.origin;
    let len = to_target.norm();
    if len <= r {
        return 1.0;
    }
    let axis = to_target / len;
    let mut worst: f64 = 0.0;
    for p in cloud {
        if (p - point).norm() <= r {
            continue;
        }
        let rel = p - frame.origin;
        let s = rel.dot(&axis);
        if s <= 0.0 || s >= len - r {
            continue;
        }
        let radial = (rel - axis * s).norm();
        if radial < r {
            worst = worst.max(r - radial);
        }
    }
    (1.0 - worst / r).clamp(0.0, 1.0)
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Fraction of the cup disk (radius `r`, centered at `point`, normal to
/// `normal`) lying within sampling distance of the surface. Measured ring
/// by ring as the union of arcs the nearby points cover, so the result does
/// not depend on how the tangent plane is parameterized.
fn disk_coverage(point: &Vec3, normal: &Vec3, cloud: &[Vec3], r: f64) -> f64 {
    let n = normal.normalize();
    let (e1, e2) = tangent_basis(&n);
    let slab = r / 3.0;
    let reach = r * 1.1;
    let proj: Vec<[f64; 2]> = cloud
        .iter()
        .filter_map(|p| {
            let d = p - point;
            if d.dot(&n).abs() > slab {
                return None;
            }
            let q = [d.dot(&e1), d.dot(&e2)];
            (q[0].hypot(q[1]) <= reach).then_some(q)
        })
        .collect();
    if proj.len() < 3 {
        return 0.0;
    }

    let spacing = median_spacing(&proj);
    if !(spacing > 0.0) {
        return 0.0;
    }
    let h = 0.75 * spacing;
    let polar: Vec<(f64, f64)> = proj.iter().map(|q| (q[0].hypot(q[1]), q[1].atan2(q[0]))).collect();

    let rings = 25;
    let mut covered = 0.0;
    let mut total = 0.0;
    for k in 0..rings {
        let rho = (k as f64 + 0.5) * r / rings as f64;
        total += rho;
        covered += rho * ring_coverage(rho, &polar, h);
    }
    covered / total
}

/// Covered fraction of the circle of radius `rho` under disks of radius
/// `h` around the given polar points.
fn ring_coverage(rho: f64, polar: &[(f64, f64)], h: f64) -> f64 {
    let mut arcs: Vec<(f64, f64)> = Vec::new();
    for &(d, theta) in polar {
        if (d - rho).abs() > h {
            continue;
        }
        if d + rho <= h {
            return 1.0;
        }
        let half = ((rho * rho + d * d - h * h) / (2.0 * rho * d)).clamp(-1.0, 1.0).acos();
        let lo = (theta - half).rem_euclid(TAU);
        let hi = lo + 2.0 * half;
        if hi > TAU {
            arcs.push((lo, TAU));
            arcs.push((0.0, hi - TAU));
        } else {
            arcs.push((lo, hi));
        }
    }
    arcs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut len = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in arcs {
        cur = match cur {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                len += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = cur {
        len += e - s;
    }
    (len / TAU).min(1.0)
}

/// Median nearest-neighbour distance over a strided subsample.
fn median_spacing(proj: &[[f64; 2]]) -> f64 {
    let stride = (proj.len() / 256).max(1);
    let mut nn: Vec<f64> = proj
        .iter()
        .enumerate()
        .step_by(stride)
        .filter_map(|(i, a)| {
            proj.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                .filter(|&d| d > 0.0)
                .min_by(f64::total_cmp)
        })
        .collect();
    if nn.is_empty() {
        return 0.0;
    }
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2]
}

/// Attaches scores to every candidate.
pub fn score_all(candidates: &mut [SuctionCandidate], cloud: &PointCloud, params: &OracleConfig) {
    for c in candidates {
        c.scores = Some(score_candidate(c, cloud, params));
    }
}

/// Ties go to the earlier projected pixel in raster order, then to the
/// smaller camera-frame point, never to the label.
fn raster_order(a: &SuctionCandidate, b: &SuctionCandidate) -> std::cmp::Ordering {
    a.pixel
        .v
        .total_cmp(&b.pixel.v)
        .then(a.pixel.u.total_cmp(&b.pixel.u))
        .then_with(|| {
            a.point_camera
                .iter()
                .zip(b.point_camera.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Ranks masked candidates by total score (ties: see [`raster_order`]) and
/// refuses when nothing is left or the best total misses the threshold.
pub fn oracle_decide(
    candidates: &[SuctionCandidate],
    cloud: &PointCloud,
    target_mask: Option<&PixelMask>,
    params: &OracleConfig,
) -> Decision {
    if candidates.is_empty() {
        return Decision::Refused(Refusal {
            reason: "no candidates".into(),
        });
    }
    let in_target: Vec<&SuctionCandidate> = candidates
        .iter()
        .filter(|c| target_mask.is_none_or(|m| m.contains(c.pixel.u, c.pixel.v)))
        .collect();
    if in_target.is_empty() {
        return Decision::Refused(Refusal {
            reason: "target not found".into(),
        });
    }
    let mut ranked: Vec<(&SuctionCandidate, GeometricScores)> = in_target
        .iter()
        .map(|c| (*c, c.scores.unwrap_or_else(|| score_candidate(c, cloud, params))))
        .collect();
    ranked.sort_by(|a, b| b.1.total.total_cmp(&a.1.total).then_with(|| raster_order(a.0, b.0)));
    let ranked: Vec<(u32, GeometricScores)> = ranked.into_iter().map(|(c, s)| (c.label, s)).collect();
    let best = ranked[0].1.total;
    if best < params.threshold {
        return Decision::Refused(Refusal {
            reason: format!(
                "best suction score {best:.3} is below threshold {:.3}",
                params.threshold
            ),
        });
    }
    let chosen: Vec<(u32, GeometricScores)> = ranked
        .into_iter()
        .filter(|(_, s)| s.total >= params.threshold)
        .take(params.max_selected)
        .collect();
    let rationale = chosen
        .iter()
        .map(|(l, s)| {
            format!(
                "#{l}: total {:.3} (flatness {:.3}, perpendicularity {:.3}, accessibility {:.3}, stability {:.3})",
                s.total, s.flatness, s.perpendicularity, s.accessibility, s.stability
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let raw = serde_json::to_string(
        &chosen
            .iter()
            .map(|(l, s)| serde_json::json!({"label": l, "scores": s}))
            .collect::<Vec<_>>(),
    )
    .unwrap_or_default();
    Decision::Selected(VlmDecision {
        selected_labels: chosen.iter().map(|(l, _)| *l).collect(),
        detected_items: Vec::new(),
        rationale,
        raw_response: raw,
    })
}

pub struct OracleDecider {
    params: OracleConfig,
}

impl OracleDecider {
    pub fn new(params: OracleConfig) -> Self {
        Self { params }
    }
}

impl Decider for OracleDecider {
    fn decide(&mut self, q: &Query<'_>) -> Result<Decision, VlmError> {
        let d = oracle_decide(q.candidates, q.cloud, q.target_mask, &self.params);
        d.check_labels(q.candidates)?;
        Ok(d)
    }
}
