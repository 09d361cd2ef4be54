//! Camera-to-image and camera-to-robot mappings, and assembly of the
//! labeled suction candidate set.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Cluster;
use crate::digest::Fingerprint;
use crate::rgbd::CameraIntrinsics;
use crate::vlm::GeometricScores;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("point has z = {0}; only points in front of the camera project")]
    BehindCamera(f64),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    /// Nearest integer pixel.
    pub fn rounded(&self) -> (i64, i64) {
        (self.u.round() as i64, self.v.round() as i64)
    }
}

/// Pinhole projection with perspective division.
pub fn project_to_pixel(point: &Vec3, intr: &CameraIntrinsics) -> Result<PixelPoint, ProjectionError> {
    if !(point.z > 0.0) {
        return Err(ProjectionError::BehindCamera(point.z));
    }
    Ok(PixelPoint {
        u: intr.fx * point.x / point.z + intr.cx,
        v: intr.fy * point.y / point.z + intr.cy,
    })
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformJson", into = "TransformJson")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct TransformJson {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<TransformJson> for RigidTransform {
    type Error = ProjectionError;

    fn try_from(raw: TransformJson) -> Result<Self, Self::Error> {
        let r = raw.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], //
            r[1][0], r[1][1], r[1][2], //
            r[2][0], r[2][1], r[2][2],
        );
        RigidTransform::new(rotation, Vec3::from(raw.translation))
    }
}

impl From<RigidTransform> for TransformJson {
    fn from(xf: RigidTransform) -> Self {
        let m = xf.rotation;
        TransformJson {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [xf.translation.x, xf.translation.y, xf.translation.z],
        }
    }
}

const ORTHO_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, ProjectionError> {
        let gram = rotation.transpose() * rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(ProjectionError::InvalidTransform(format!(
                "rotation not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(ProjectionError::InvalidTransform(format!(
                "rotation determinant {det}, expected +1"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(ProjectionError::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis`, then translation `t`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Builds a transform whose rotation columns are the given frame axes.
    /// The axes are re-orthonormalized.
    pub fn from_axes(x: Vec3, y: Vec3, z: Vec3, t: Vec3) -> Result<Self, ProjectionError> {
        let m = Matrix3::from_columns(&[x, y, z]);
        let rot = Rotation3::from_matrix(&m);
        Self::new(*rot.matrix(), t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProjectionError> {
        let s = fs::read_to_string(path).map_err(|source| ProjectionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&s)?)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn to_robot_frame(point: &Vec3, xf: &RigidTransform) -> Vec3 {
    xf.apply_point(point)
}

/// Normals rotate but do not translate.
pub fn normal_to_robot_frame(normal: &Vec3, xf: &RigidTransform) -> Vec3 {
    xf.apply_vector(normal)
}

/// One numbered suction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuctionCandidate {
    pub label: u32,
    pub point_camera: Vec3,
    pub normal_camera: Vec3,
    pub pixel: PixelPoint,
    pub point_robot: Vec3,
    pub normal_robot: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<GeometricScores>,
}

/// Turns suctionable clusters that project inside the image into labeled
/// candidates. Labels run 1..=m in raster order of the projected pixel.
pub fn build_candidates(
    clusters: &[Cluster],
    intr: &CameraIntrinsics,
    xf: &RigidTransform,
) -> Vec<SuctionCandidate> {
    let max_u = intr.width as f64 - 1.0;
    let max_v = intr.height as f64 - 1.0;
    let mut kept: Vec<(usize, SuctionCandidate)> = clusters
        .iter()
        .filter_map(|c| {
            let normal = c.normal?;
            let pixel = project_to_pixel(&c.centroid, intr).ok()?;
            if !(pixel.u >= 0.0 && pixel.u <= max_u && pixel.v >= 0.0 && pixel.v <= max_v) {
                return None;
            }
            Some((
                c.id,
                SuctionCandidate {
                    label: 0,
                    point_camera: c.centroid,
                    normal_camera: normal,
                    pixel,
                    point_robot: to_robot_frame(&c.centroid, xf),
                    normal_robot: normal_to_robot_frame(&normal, xf),
                    scores: None,
                },
            ))
        })
        .collect();
    kept.sort_by(|(ia, a), (ib, b)| {
        a.pixel
            .v
            .total_cmp(&b.pixel.v)
            .then(a.pixel.u.total_cmp(&b.pixel.u))
            .then(ia.cmp(ib))
    });
    kept.into_iter()
        .enumerate()
        .map(|(i, (_, mut c))| {
            c.label = i as u32 + 1;
            c
        })
        .collect()
}

/// Order-sensitive fingerprint of a candidate set's labels and geometry.
pub fn candidate_digest(candidates: &[SuctionCandidate]) -> String {
    let mut fp = Fingerprint::new();
    for c in candidates {
        let mut bytes = Vec::with_capacity(4 + 8 * 14);
        bytes.extend_from_slice(&c.label.to_le_bytes());
        for v in [&c.point_camera, &c.normal_camera, &c.point_robot, &c.normal_robot] {
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&c.pixel.u.to_le_bytes());
        bytes.extend_from_slice(&c.pixel.v.to_le_bytes());
        fp = fp.part(&bytes);
    }
    fp.finish()
}
