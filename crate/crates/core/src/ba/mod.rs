//! Sliding-window bundle adjustment with an optional monocular depth prior.
//!
//! The objective over a window is
//!
//! ```text
//! E(G, d) = Σ_edges c_e · ρ(‖π(G_j G_i⁻¹ π⁻¹(x_ik, d_ik)) − x̂_ik^j‖) + Σ_patches r_prior²
//! ```
//!
//! where `ρ` is the Huber cost, `c_e` the edge confidence, and the prior residual
//! pulls each patch inverse depth toward its rescaled monocular estimate.

mod solver;

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reproject_patch, CameraIntrinsics, GeometryError, Pose};

pub use solver::{compute_step, solve, LinearSolver, SolveOptions, SolveReport};

/// Smallest inverse depth a patch may take after an update.
pub const MIN_INV_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("normal equations stayed singular with damping up to {lambda:e}")]
    SingularSystem { lambda: f64 },
    #[error("not enough constraints: {0}")]
    NotEnoughConstraints(String),
    #[error("no recent patches or prior samples to align the depth prior")]
    EmptyHistory,
    #[error("edge references unknown frame or patch: {0}")]
    UnknownReference(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub frame_id: u32,
    pub patch_id: u32,
    pub center: Vector2<f64>,
    pub inv_depth: f64,
    pub footprint: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondenceEdge {
    pub src_frame: u32,
    pub patch_id: u32,
    pub dst_frame: u32,
    pub observed: Vector2<f64>,
    pub confidence: f64,
}

/// Monocular prior depth of one patch together with its frame's alignment scale `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPrior {
    pub frame_id: u32,
    pub patch_id: u32,
    pub prior_depth: f64,
    pub frame_scale: f64,
}

/// Space in which the prior residual is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthResidualSpace {
    /// `√μ (d − 1/(α D))`
    #[default]
    Inverse,
    /// `√μ (1/d − α D)`
    Metric,
}

/// How the denominator of the prior alignment scale is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaDenominator {
    /// Median of patch depths (`1 / inv_depth`); unit-consistent.
    #[default]
    Depth,
    /// Median of raw inverse depths, as the formula is literally written.
    InverseDepth,
}

#[derive(Debug, Clone)]
pub struct BaWindow {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<u32>,
    pub poses: Vec<Pose>,
    pub patches: Vec<Patch>,
    pub edges: Vec<CorrespondenceEdge>,
    pub priors: Vec<DepthPrior>,
    pub mu: f64,
    pub huber_delta: f64,
    pub depth_space: DepthResidualSpace,
    pub fixed_frames: BTreeSet<u32>,
    /// Patches whose inverse depth is held constant, keyed by `(frame_id, patch_id)`.
    pub fixed_patches: BTreeSet<(u32, u32)>,
}

impl BaWindow {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            frames: Vec::new(),
            poses: Vec::new(),
            patches: Vec::new(),
            edges: Vec::new(),
            priors: Vec::new(),
            mu: 0.0,
            huber_delta: 2.0,
            depth_space: DepthResidualSpace::Inverse,
            fixed_frames: BTreeSet::new(),
            fixed_patches: BTreeSet::new(),
        }
    }

    pub fn frame_index(&self, frame_id: u32) -> Option<usize> {
        self.frames.iter().position(|&f| f == frame_id)
    }

    pub fn pose(&self, frame_id: u32) -> Option<&Pose> {
        self.frame_index(frame_id).map(|i| &self.poses[i])
    }

    pub fn patch(&self, frame_id: u32, patch_id: u32) -> Option<&Patch> {
        self.patches.iter().find(|p| p.frame_id == frame_id && p.patch_id == patch_id)
    }
}

/// Reprojection residual of one edge; `active == false` when the point falls
/// behind the target camera, in which case the residual is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeResidual {
    pub residual: Vector2<f64>,
    pub active: bool,
}

pub fn residual_reprojection(edge: &CorrespondenceEdge, window: &BaWindow) -> Result<EdgeResidual, BaError> {
    let missing = || BaError::UnknownReference(format!("{edge:?}"));
    let g_i = window.pose(edge.src_frame).ok_or_else(missing)?;
    let g_j = window.pose(edge.dst_frame).ok_or_else(missing)?;
    let patch = window.patch(edge.src_frame, edge.patch_id).ok_or_else(missing)?;
    match reproject_patch(&window.intrinsics, g_i, g_j, &patch.center, patch.inv_depth) {
        Ok(px) => Ok(EdgeResidual { residual: px - edge.observed, active: true }),
        Err(GeometryError::BehindCamera | GeometryError::DepthNonPositive) => {
            Ok(EdgeResidual { residual: Vector2::zeros(), active: false })
        }
        Err(e) => Err(BaError::UnknownReference(e.to_string())),
    }
}

/// Prior residual for one patch. `mu = 0` disables it.
pub fn residual_depth(inv_depth: f64, prior_depth: f64, frame_scale: f64, mu: f64, space: DepthResidualSpace) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    let target = frame_scale * prior_depth;
    match space {
        DepthResidualSpace::Inverse => mu.sqrt() * (inv_depth - 1.0 / target),
        DepthResidualSpace::Metric => mu.sqrt() * (1.0 / inv_depth - target),
    }
}

/// Derivative of [`residual_depth`] with respect to the inverse depth.
pub fn residual_depth_jacobian(inv_depth: f64, mu: f64, space: DepthResidualSpace) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    match space {
        DepthResidualSpace::Inverse => mu.sqrt(),
        DepthResidualSpace::Metric => -mu.sqrt() / (inv_depth * inv_depth),
    }
}

/// Huber IRLS weight: 1 inside the threshold, `δ/‖r‖` outside.
pub fn robust_weight(residual_norm: f64, huber_delta: f64) -> f64 {
    if residual_norm <= huber_delta {
        1.0
    } else {
        huber_delta / residual_norm
    }
}

/// Huber cost matching [`robust_weight`]: `s²` inside, `2δs − δ²` outside.
pub fn huber_cost(residual_norm: f64, huber_delta: f64) -> f64 {
    if residual_norm <= huber_delta {
        residual_norm * residual_norm
    } else {
        2.0 * huber_delta * residual_norm - huber_delta * huber_delta
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Scale `α` aligning a frame's monocular prior depths to the current map:
/// `median(prior) / median(recent patch depth)`.
pub fn align_prior_scale(
    prior_depths: &[f64],
    recent_inv_depths: &[f64],
    denominator: AlphaDenominator,
) -> Result<f64, BaError> {
    let num = median(prior_depths).ok_or(BaError::EmptyHistory)?;
    let den = match denominator {
        AlphaDenominator::Depth => {
            let depths: Vec<f64> = recent_inv_depths.iter().map(|d| 1.0 / d).collect();
            median(&depths)
        }
        AlphaDenominator::InverseDepth => median(recent_inv_depths),
    }
    .ok_or(BaError::EmptyHistory)?;
    if !(num > 0.0 && den > 0.0 && num.is_finite() && den.is_finite()) {
        return Err(BaError::EmptyHistory);
    }
    Ok(num / den)
}

/// Total robust cost of a window at its current state (inactive edges contribute zero).
pub fn window_cost(window: &BaWindow) -> Result<f64, BaError> {
    let frames: HashMap<u32, &Pose> = window.frames.iter().copied().zip(&window.poses).collect();
    let patches: HashMap<(u32, u32), &Patch> = window.patches.iter().map(|p| ((p.frame_id, p.patch_id), p)).collect();
    let mut cost = 0.0;
    for e in &window.edges {
        let missing = || BaError::UnknownReference(format!("{e:?}"));
        let g_i = frames.get(&e.src_frame).ok_or_else(missing)?;
        let g_j = frames.get(&e.dst_frame).ok_or_else(missing)?;
        let p = patches.get(&(e.src_frame, e.patch_id)).ok_or_else(missing)?;
        if let Ok(px) = reproject_patch(&window.intrinsics, g_i, g_j, &p.center, p.inv_depth) {
            cost += e.confidence * huber_cost((px - e.observed).norm(), window.huber_delta);
        }
    }
    for p in &window.priors {
        if let Some(patch) = patches.get(&(p.frame_id, p.patch_id)) {
            let r = residual_depth(patch.inv_depth, p.prior_depth, p.frame_scale, window.mu, window.depth_space);
            cost += r * r;
        }
    }
    Ok(cost)
}
