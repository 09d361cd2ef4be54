//! Suction-point proposal and pick execution from RGB-D observations.
//!
//! The pipeline turns a registered depth + color pair into a handful of
//! labeled suction candidates, draws them as numbered circles on the color
//! image, asks a decider (a chat-completions endpoint, a geometric oracle or
//! a recorded session) which marker to use, and then drives an iterative
//! approach-and-suction loop against an [`executor::Environment`].
//!
//! Module map:
//!
//! - [`rgbd`]: intrinsics, depth/color frames, deprojection, workspace crop
//! - [`clustering`]: K-means++ segmentation, centroids and PCA normals
//! - [`projection`]: pinhole projection, rigid transforms, candidate assembly
//! - [`prompting`]: marker rendering and the three-part text prompt
//! - [`vlm`]: decision backends and geometric scoring
//! - [`pipeline`]: frames to labeled candidates in one call
//! - [`executor`]: the observe/decide/approach loop
//! - [`sim`]: analytic shelf world used as a stand-in environment
//! - [`eval`]: selection accuracy and pick success bookkeeping

// `!(x > 0.0)` style guards are how NaN gets rejected here
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod digest;
pub mod eval;
pub mod executor;
pub mod pipeline;
pub mod projection;
pub mod prompting;
pub mod rgbd;
pub mod sim;
pub mod vlm;

pub use nalgebra::{Matrix3, Vector3};

/// 3D point or vector in meters.
pub type Vec3 = Vector3<f64>;
