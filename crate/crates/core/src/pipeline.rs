//! One-shot proposal: RGB-D frames in, labeled candidates and the marker
//! image out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{segment, ClusteringConfig, ClusteringError};
use crate::projection::{build_candidates, RigidTransform, SuctionCandidate};
use crate::prompting::{render_markers, AnnotatedImage, MarkerStyle};
use crate::rgbd::{check_registered, crop_workspace, deproject, Aabb, CameraIntrinsics, ColorFrame, DepthFrame, PointCloud, RgbdError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Rgbd(#[from] RgbdError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub clustering: ClusteringConfig,
    /// Camera-frame crop; no crop when absent.
    pub workspace: Option<Aabb>,
    /// Camera to robot frame.
    pub transform: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    /// Cropped camera-frame cloud the candidates came from.
    pub cloud: PointCloud,
    pub candidates: Vec<SuctionCandidate>,
    pub annotated: AnnotatedImage,
}

/// Deproject, crop, cluster, project and draw. Too few points to cluster
/// yields an empty candidate list rather than an error.
pub fn propose(
    color: &ColorFrame,
    depth: &DepthFrame,
    intr: &CameraIntrinsics,
    cfg: &ProposalConfig,
) -> Result<Proposal, PipelineError> {
    intr.validate()?;
    check_registered(color, depth, intr)?;
    cfg.clustering.validate()?;
    let cloud = deproject(depth, intr)?;
    let cloud = match &cfg.workspace {
        Some(b) => crop_workspace(&cloud, b),
        None => cloud,
    };
    let candidates = match segment(&cloud, &cfg.clustering) {
        Ok(clusters) => build_candidates(&clusters, intr, &cfg.transform),
        Err(ClusteringError::Empty | ClusteringError::TooFewDistinct { .. }) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let annotated = render_markers(color, &candidates, &MarkerStyle::for_width(intr.width));
    Ok(Proposal {
        cloud,
        candidates,
        annotated,
    })
}
