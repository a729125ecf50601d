//! Front-end output consumed by the reconstruction pipeline.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Vector2, Vector3};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::loop_detection::Descriptor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameInfo {
    pub id: u32,
    pub timestamp: f64,
}

/// A patch location proposed by the front-end; depth is unknown until the pipeline initializes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchCandidate {
    pub frame_id: u32,
    pub patch_id: u32,
    pub center: Vector2<f64>,
    pub footprint: u32,
}

/// Predicted location of patch `(src_frame, patch_id)` in `dst_frame`.
///
/// `dst_prior_depth` is the monocular depth of `dst_frame` sampled at `observed`
/// (NaN when the front-end has none).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRecord {
    pub src_frame: u32,
    pub patch_id: u32,
    pub dst_frame: u32,
    pub observed: Vector2<f64>,
    pub confidence: f64,
    pub dst_prior_depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorRecord {
    pub frame_id: u32,
    pub patch_id: u32,
    pub prior_depth: f64,
}

/// Binary image mask, row-major, nonzero = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; (width * height) as usize] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![255; (width * height) as usize] }
    }

    pub fn is_masked(&self, px: &Vector2<f64>) -> bool {
        let (x, y) = (px.x.floor(), px.y.floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            self.data[y as usize * self.width as usize + x as usize] = 255;
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPatch {
    pub frame_id: u32,
    pub patch_id: u32,
    pub landmark: u32,
    pub true_depth: f64,
    pub dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera pose per frame.
    pub poses: Vec<Pose>,
    /// Landmark positions at time zero.
    pub landmarks: Vec<Vector3<f64>>,
    /// Landmark velocities (zero for static points).
    pub velocities: Vec<Vector3<f64>>,
    pub place_ids: Vec<u64>,
    pub patches: Vec<GtPatch>,
    /// Multiplicative scale of each frame's depth prior.
    pub prior_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameInfo>,
    pub patches: Vec<PatchCandidate>,
    pub edges: Vec<EdgeRecord>,
    pub priors: Vec<PriorRecord>,
    pub masks: BTreeMap<u32, Mask>,
    pub descriptors: Vec<Descriptor>,
    pub ground_truth: Option<GroundTruth>,
}

/// Lookup tables over a bundle.
#[derive(Debug, Clone, Default)]
pub struct BundleIndex {
    /// Candidate patch indices per frame position.
    pub patches_by_frame: Vec<Vec<usize>>,
    /// Edge indices keyed by `(src_frame, dst_frame)`.
    pub edges_by_pair: HashMap<(u32, u32), Vec<usize>>,
    pub patch_lookup: HashMap<(u32, u32), usize>,
    pub prior_lookup: HashMap<(u32, u32), f64>,
    pub frame_pos: HashMap<u32, usize>,
}

impl BundleIndex {
    pub fn new(bundle: &DatasetBundle) -> Self {
        let frame_pos: HashMap<u32, usize> = bundle.frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        let mut patches_by_frame = vec![Vec::new(); bundle.frames.len()];
        let mut patch_lookup = HashMap::new();
        for (i, p) in bundle.patches.iter().enumerate() {
            if let Some(&pos) = frame_pos.get(&p.frame_id) {
                patches_by_frame[pos].push(i);
            }
            patch_lookup.insert((p.frame_id, p.patch_id), i);
        }
        let mut edges_by_pair: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (i, e) in bundle.edges.iter().enumerate() {
            edges_by_pair.entry((e.src_frame, e.dst_frame)).or_default().push(i);
        }
        let prior_lookup = bundle.priors.iter().map(|p| ((p.frame_id, p.patch_id), p.prior_depth)).collect();
        Self { patches_by_frame, edges_by_pair, patch_lookup, prior_lookup, frame_pos }
    }

    pub fn edges(&self, src: u32, dst: u32) -> &[usize] {
        self.edges_by_pair.get(&(src, dst)).map(|v| v.as_slice()).unwrap_or(&[])
    }
}
