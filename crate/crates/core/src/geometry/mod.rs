//! Lie-group geometry, the pinhole camera, and point-set alignment.
//!
//! All solvers in this crate use the same retraction: a tangent update `ξ` is
//! applied on the left, `G ← exp(ξ)·G`, followed by quaternion renormalization.

pub mod align;
pub mod camera;
pub mod se3;
pub mod sim3;
pub mod so3;

use thiserror::Error;

pub use align::{align_points, Alignment};
pub use camera::{
    backproject, project, reproject_patch, reproject_with_jacobians, CameraIntrinsics, Reprojection,
};
pub use se3::{Pose, Twist6};
pub use sim3::{Matrix7, SimPose, Twist7};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("point depth is not positive")]
    DepthNonPositive,
    #[error("point lands behind the target camera")]
    BehindCamera,
    #[error("point set is degenerate (collinear or too small)")]
    DegenerateCollinear,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}
