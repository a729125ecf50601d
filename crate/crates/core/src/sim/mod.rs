//! Deterministic synthetic front-end: worlds, trajectories, correspondences,
//! depth priors, masks and place descriptors, with ground truth.

mod descriptors;
mod presets;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraIntrinsics;

pub use descriptors::{base_vector, place_id, render_descriptors};
pub use presets::{standard_world, standard_worlds, STANDARD_WORLD_NAMES};
pub use world::{corrupt_prior_scale, generate, prior_scale_walk, trajectory_poses};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("unknown world preset {0}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Straight motion, `step` metres per frame.
    Forward { frames: u32, step: f64 },
    /// Constant turn rate while moving.
    Arc { frames: u32, step: f64, yaw_deg: f64 },
    /// Rotation about the vertical axis with the camera center held still.
    PureRotation { frames: u32, yaw_deg: f64 },
    Pause { frames: u32 },
}

impl Segment {
    pub fn frames(&self) -> u32 {
        match *self {
            Segment::Forward { frames, .. }
            | Segment::Arc { frames, .. }
            | Segment::PureRotation { frames, .. }
            | Segment::Pause { frames } => frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Building facades on both sides of the path plus the road surface.
    Street { half_width: f64, facade_height: f64, ground_fraction: f64 },
    /// A ring of facades around the plaza center plus the plaza floor.
    Plaza { center_x: f64, center_z: f64, radius: f64, facade_height: f64, ground_fraction: f64 },
    /// Points uniform in a ball ahead of the first camera.
    Sphere { distance: f64, radius: f64 },
}

/// Head bob as a function of distance travelled, so standing still keeps orientation fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bob {
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub wavelength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub prior_depth_lognormal_sigma: f64,
    pub prior_scale_walk_sigma: f64,
    pub descriptor_sigma: f64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self { pixel_sigma: 0.0, prior_depth_lognormal_sigma: 0.0, prior_scale_walk_sigma: 0.0, descriptor_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub name: String,
    pub seed: u64,
    pub landmark_count: usize,
    pub scene_extent: f64,
    pub layout: Layout,
    pub trajectory_script: Vec<Segment>,
    pub start_heading_deg: f64,
    pub camera_height: f64,
    pub fps: f64,
    pub bob: Bob,
    pub dynamic_object_count: usize,
    pub dynamic_fraction_of_view: f64,
    /// Metres per second.
    pub dynamic_speed: f64,
    pub noise: NoiseSpec,
    pub camera: CameraIntrinsics,
    pub candidates_per_frame: usize,
    pub edge_radius: u32,
    pub descriptor_dim: usize,
    pub place_cell: f64,
    pub heading_bins: u32,
    /// Frames farther apart than `edge_radius` still get edges when their centers are this close.
    pub revisit_radius: f64,
    pub max_depth: f64,
}

impl WorldSpec {
    pub fn frame_count(&self) -> usize {
        1 + self.trajectory_script.iter().map(|s| s.frames() as usize).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        let n = &self.noise;
        for (name, v) in [
            ("pixel_sigma", n.pixel_sigma),
            ("prior_depth_lognormal_sigma", n.prior_depth_lognormal_sigma),
            ("prior_scale_walk_sigma", n.prior_scale_walk_sigma),
            ("descriptor_sigma", n.descriptor_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a finite value >= 0"));
            }
        }
        if !(self.scene_extent > 0.0) {
            return bad("scene_extent must be > 0");
        }
        if self.frame_count() < 2 {
            return bad("trajectory script must produce at least 2 frames");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be > 0");
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction_of_view) {
            return bad("dynamic_fraction_of_view must lie in [0, 1]");
        }
        if self.descriptor_dim == 0 || self.heading_bins == 0 || !(self.place_cell > 0.0) {
            return bad("descriptor_dim, heading_bins and place_cell must be positive");
        }
        if !(self.max_depth > 0.0) {
            return bad("max_depth must be > 0");
        }
        if !matches!(self.layout, Layout::Sphere { .. }) && self.landmark_count == 0 {
            return bad("landmark_count must be > 0");
        }
        self.camera.validate().map_err(|e| SimError::InvalidSpec(e.to_string()))
    }
}

/// Independent random streams, one per subsystem.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Landmarks = 1,
    Dynamic = 2,
    Candidates = 3,
    Pixel = 4,
    Prior = 5,
    PriorEdge = 6,
    ScaleWalk = 7,
    Descriptor = 8,
}

pub(crate) fn stream(seed: u64, s: Stream) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}
