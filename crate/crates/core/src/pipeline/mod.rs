//! Incremental reconstruction: initialization with focal recovery, mask-aware patch sampling,
//! windowed depth-regularized BA, keyframing, loop closure and post-refinement.

mod init;
mod refine;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ba::{
    align_prior_scale, median, solve, AlphaDenominator, BaError, BaWindow, CorrespondenceEdge, DepthPrior,
    DepthResidualSpace, Patch, SolveOptions,
};
use crate::bundle::{BundleIndex, DatasetBundle, Mask, PatchCandidate};
use crate::eval::Trajectory;
use crate::geometry::{align_points, reproject_patch, CameraIntrinsics, Pose, SimPose};
use crate::loop_detection::{Descriptor, DescriptorStore, LoopCandidate, LoopConfirmer};
use crate::pose_graph::{apply_correction, lift_trajectory, EdgeKind, OptimizeOptions, PgoError, PoseGraph, Sim3Edge};

pub use init::{
    estimate_focal, initialize_with_focal, mean_flow, reconstruct, select_init_frames, FocalEstimate, InitContext,
    InitSolution,
};
pub use refine::{post_refine, RefineReport};

use init::{is_masked, triangulate_point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("only {accepted} of {required} initialization frames have enough parallax")]
    InsufficientParallax { accepted: usize, required: usize },
    #[error("initialization frames are explained by rotation alone; focal length and depth are unobservable")]
    DegenerateGeometry,
    #[error("frame {0} has no unmasked patch candidates")]
    FullyMasked(u32),
    #[error("refinement rejected ({reason}); state rolled back")]
    RefinementDiverged { reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ba(#[from] BaError),
    #[error(transparent)]
    Pgo(#[from] PgoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum PostRefine {
    Off,
    #[default]
    Retriangulate,
    RetriangulateGlobalBa,
}

impl fmt::Display for PostRefine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostRefine::Off => "off",
            PostRefine::Retriangulate => "retriangulate",
            PostRefine::RetriangulateGlobalBa => "retriangulate+global_ba",
        })
    }
}

impl FromStr for PostRefine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(PostRefine::Off),
            "retriangulate" => Ok(PostRefine::Retriangulate),
            "retriangulate+global_ba" => Ok(PostRefine::RetriangulateGlobalBa),
            other => Err(format!("expected off, retriangulate or retriangulate+global_ba, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_init: usize,
    pub flow_threshold_px: f64,
    pub window_size: usize,
    pub patches_per_frame: usize,
    pub patch_footprint: u32,
    pub mu: f64,
    pub huber_delta: f64,
    pub depth_residual_space: DepthResidualSpace,
    pub alpha_denominator: AlphaDenominator,
    pub ba_iterations: usize,
    /// Newest-but-one frame is dropped when its mean flow to the previous keyframe is below this.
    pub keyframe_flow_px: f64,
    pub tracking_lost_px: f64,
    pub loop_closure: bool,
    pub loop_threshold: f64,
    pub loop_exclusion: u32,
    pub loop_streak: u32,
    pub loop_tolerance: u32,
    pub loop_cooldown: u32,
    pub loop_min_points: usize,
    pub loop_information: f64,
    pub use_masks: bool,
    pub seed: u64,
    pub post_refine: PostRefine,
    /// Known focal length; `None` runs the focal search.
    pub focal: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_init: 8,
            flow_threshold_px: 12.0,
            window_size: 10,
            patches_per_frame: 64,
            patch_footprint: 3,
            mu: 0.05,
            huber_delta: 2.0,
            depth_residual_space: DepthResidualSpace::Metric,
            alpha_denominator: AlphaDenominator::Depth,
            ba_iterations: 20,
            keyframe_flow_px: 6.0,
            tracking_lost_px: 8.0,
            loop_closure: true,
            loop_threshold: 0.9,
            loop_exclusion: 90,
            loop_streak: 3,
            loop_tolerance: 2,
            loop_cooldown: 50,
            loop_min_points: 8,
            loop_information: 10.0,
            use_masks: true,
            seed: 0,
            post_refine: PostRefine::Retriangulate,
            focal: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.n_init < 5 {
            return bad("n_init must be >= 5");
        }
        if self.window_size < 4 {
            return bad("window_size must be >= 4");
        }
        if self.patches_per_frame == 0 || self.patch_footprint == 0 || self.ba_iterations == 0 {
            return bad("patches_per_frame, patch_footprint and ba_iterations must be > 0");
        }
        for (name, v) in [
            ("flow_threshold_px", self.flow_threshold_px),
            ("huber_delta", self.huber_delta),
            ("keyframe_flow_px", self.keyframe_flow_px),
            ("tracking_lost_px", self.tracking_lost_px),
            ("loop_threshold", self.loop_threshold),
            ("loop_information", self.loop_information),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be >= 0");
        }
        if self.loop_streak == 0 || self.loop_min_points < 3 {
            return bad("loop_streak must be > 0 and loop_min_points >= 3");
        }
        if let Some(f) = self.focal {
            if !(f > 0.0 && f.is_finite()) {
                return bad("focal must be > 0");
            }
        }
        Ok(())
    }
}

/// Uniform random choice of unmasked candidates, seeded per frame.
pub fn sample_patches(
    frame_id: u32,
    candidates: &[PatchCandidate],
    mask: Option<&Mask>,
    n: usize,
    seed: u64,
) -> Result<Vec<PatchCandidate>, PipelineError> {
    let free: Vec<&PatchCandidate> = candidates.iter().filter(|c| mask.is_none_or(|m| !m.is_masked(&c.center))).collect();
    if free.is_empty() {
        return Err(PipelineError::FullyMasked(frame_id));
    }
    if let Some(m) = mask {
        if m.masked_fraction() > 0.9 {
            log::warn!("frame {frame_id}: less than 10% of the image is unmasked, {} candidates left", free.len());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id as u64 + 1);
    let mut pick = sample(&mut rng, free.len(), n.min(free.len())).into_vec();
    pick.sort_unstable();
    Ok(pick.into_iter().map(|i| *free[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Initialized { frames: Vec<u32>, focal: f64, score: f64 },
    FullyMasked { frame: u32 },
    TrackingLost { frame: u32, median_residual: f64 },
    LoopDetected { query: u32, matched: u32, similarity: f64 },
    LoopRejected { query: u32, matched: u32, reason: String },
    Pgo {
        query: u32,
        keyframe: u32,
        points: usize,
        alignment_rmse: f64,
        initial_cost: f64,
        final_cost: f64,
        iterations: usize,
        loop_residual_before: f64,
        loop_residual_after: f64,
    },
    Refine { mode: String, cost_before: f64, cost_after: f64, focal_before: f64, focal_after: f64 },
    RefinementDiverged { mode: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_id: u32,
    pub pose: Pose,
    pub patches: Vec<Patch>,
    /// Prior alignment scale; prior targets are `D / α`.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameStatus {
    Pending,
    Keyframe,
    /// Pose is `relative ∘ pose(anchor)`.
    Anchored { anchor: u32, relative: Pose },
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub timestamp: f64,
    pub status: FrameStatus,
    pub tracking_lost: bool,
}

#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub intrinsics: CameraIntrinsics,
    pub k_init: CameraIntrinsics,
    /// Ordered by frame id.
    pub keyframes: Vec<Keyframe>,
    pub frames: Vec<FrameRecord>,
    pub events: Vec<Event>,
    /// Graph of the most recent loop closure (after correction).
    pub pose_graph: Option<PoseGraph>,
}

impl ReconstructionState {
    pub fn keyframe(&self, frame_id: u32) -> Option<&Keyframe> {
        self.keyframes.binary_search_by_key(&frame_id, |k| k.frame_id).ok().map(|i| &self.keyframes[i])
    }

    pub fn frame_pose(&self, pos: usize) -> Option<Pose> {
        let fr = &self.frames[pos];
        match fr.status {
            FrameStatus::Pending => None,
            FrameStatus::Keyframe => self.keyframe(fr.frame_id).map(|k| k.pose),
            FrameStatus::Anchored { anchor, relative } => self.keyframe(anchor).map(|k| relative.compose(&k.pose)),
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        let poses: Vec<Option<Pose>> = (0..self.frames.len()).map(|i| self.frame_pose(i)).collect();
        let mut t = Trajectory::from_poses(&poses, 1.0);
        for (e, f) in t.entries.iter_mut().zip(&self.frames) {
            e.timestamp = f.timestamp;
            e.frame_id = f.frame_id;
        }
        t
    }

    pub fn keyframe_ids(&self) -> Vec<u32> {
        self.keyframes.iter().map(|k| k.frame_id).collect()
    }

    pub fn loop_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Pgo { .. })).count()
    }

    /// Re-express anchored frames and priors after per-keyframe scale corrections
    /// (`scales[k]` is the factor the keyframe's inverse depths were multiplied by).
    fn rescale_anchors(&mut self, scales: &HashMap<u32, f64>) {
        for f in self.frames.iter_mut() {
            if let FrameStatus::Anchored { anchor, relative } = &mut f.status {
                if let Some(s) = scales.get(anchor) {
                    relative.translation /= *s;
                }
            }
        }
        for k in self.keyframes.iter_mut() {
            if let (Some(a), Some(s)) = (k.alpha.as_mut(), scales.get(&k.frame_id)) {
                *a *= s;
            }
        }
    }
}

pub struct Pipeline<'a> {
    pub bundle: &'a DatasetBundle,
    pub index: BundleIndex,
    pub cfg: PipelineConfig,
    pub state: ReconstructionState,
    descriptors: HashMap<u32, &'a Descriptor>,
    store: DescriptorStore,
    confirmer: LoopConfirmer,
    next: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(bundle: &'a DatasetBundle, cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let k = CameraIntrinsics::centered(cfg.focal.unwrap_or(bundle.width as f64), bundle.width, bundle.height)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        let frames = bundle
            .frames
            .iter()
            .map(|f| FrameRecord { frame_id: f.id, timestamp: f.timestamp, status: FrameStatus::Pending, tracking_lost: false })
            .collect();
        Ok(Self {
            bundle,
            index: BundleIndex::new(bundle),
            store: DescriptorStore::new(cfg.loop_threshold),
            confirmer: LoopConfirmer::new(cfg.loop_streak, cfg.loop_tolerance, cfg.loop_cooldown),
            descriptors: bundle.descriptors.iter().map(|d| (d.frame_id, d)).collect(),
            cfg,
            state: ReconstructionState {
                intrinsics: k,
                k_init: k,
                keyframes: Vec::new(),
                frames,
                events: Vec::new(),
                pose_graph: None,
            },
            next: 0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.next > 0
    }

    fn masked(&self, frame: u32, px: &Vector2<f64>) -> bool {
        is_masked(self.bundle, self.cfg.use_masks, frame, px)
    }

    fn kf_index(&self, frame_id: u32) -> Option<usize> {
        self.state.keyframes.binary_search_by_key(&frame_id, |k| k.frame_id).ok()
    }

    /// Choose init frames, recover the focal length and bootstrap the map.
    pub fn initialize(&mut self) -> Result<(), PipelineError> {
        let ids = select_init_frames(self.bundle, &self.index, self.cfg.n_init, self.cfg.flow_threshold_px, self.cfg.use_masks)?;
        let ctx = InitContext::new(self.bundle, &self.index, &ids, &self.cfg)?;
        let sol = match self.cfg.focal {
            Some(_) => initialize_with_focal(&ctx, &self.state.intrinsics, self.cfg.huber_delta)?,
            None => estimate_focal(&ctx, self.cfg.huber_delta)?.solution,
        };
        self.state.intrinsics = sol.intrinsics;
        self.state.k_init = sol.intrinsics;
        for ((&f, pose), patches) in sol.frames.iter().zip(&sol.poses).zip(&sol.patches) {
            self.state.keyframes.push(Keyframe { frame_id: f, pose: *pose, patches: patches.clone(), alpha: None });
            let pos = self.index.frame_pos[&f];
            self.state.frames[pos].status = FrameStatus::Keyframe;
        }
        if self.cfg.mu > 0.0 {
            for i in 1..self.state.keyframes.len() {
                self.state.keyframes[i].alpha = self.compute_alpha(i);
            }
            self.state.keyframes[0].alpha = self.state.keyframes.get(1).and_then(|k| k.alpha);
        }
        let last_pos = self.index.frame_pos[ids.last().unwrap()];
        for pos in 0..=last_pos {
            if self.state.frames[pos].status == FrameStatus::Pending {
                self.resect(pos)?;
            }
        }
        self.state.events.push(Event::Initialized { frames: ids, focal: sol.intrinsics.fx, score: sol.score });
        for pos in 0..=last_pos {
            self.feed_descriptor(pos);
        }
        self.next = last_pos + 1;
        Ok(())
    }

    /// Pose-only registration of a frame skipped during initialization, anchored to the previous keyframe.
    fn resect(&mut self, pos: usize) -> Result<(), PipelineError> {
        let fid = self.state.frames[pos].frame_id;
        let kfs = &self.state.keyframes;
        let after = kfs.partition_point(|k| k.frame_id < fid);
        let (a, b) = (&kfs[after - 1], &kfs[after.min(kfs.len() - 1)]);
        let t = if b.frame_id > a.frame_id { (fid - a.frame_id) as f64 / (b.frame_id - a.frame_id) as f64 } else { 0.0 };
        let guess = a.pose.interpolate(&b.pose, t);
        let idx: Vec<usize> = (0..kfs.len()).collect();
        let mut w = self.build_window(&idx, &[]);
        w.fixed_frames = w.frames.iter().copied().collect();
        w.frames.push(fid);
        w.poses.push(guess);
        for k in kfs.iter() {
            let ids: HashSet<u32> = k.patches.iter().map(|p| p.patch_id).collect();
            for &ei in self.index.edges(k.frame_id, fid) {
                let e = &self.bundle.edges[ei];
                if ids.contains(&e.patch_id) && !self.masked(fid, &e.observed) {
                    w.edges.push(to_ba_edge(e));
                }
            }
        }
        w.priors.clear();
        let opts = SolveOptions { max_iterations: self.cfg.ba_iterations, freeze_depths: true, ..Default::default() };
        let pose = match solve(&mut w, &opts) {
            Ok(_) => *w.poses.last().unwrap(),
            Err(BaError::SingularSystem { lambda }) => return Err(BaError::SingularSystem { lambda }.into()),
            Err(_) => guess,
        };
        let anchor = a.frame_id;
        let relative = pose.compose(&a.pose.inverse());
        self.state.frames[pos].status = FrameStatus::Anchored { anchor, relative };
        Ok(())
    }

    /// Window over the given keyframe indices: all hosted patches, every bundle edge between
    /// window keyframes, and priors for keyframes with a known `α`.
    fn build_window(&self, kfs: &[usize], fixed: &[u32]) -> BaWindow {
        let mut w = BaWindow::new(self.state.intrinsics);
        w.mu = self.cfg.mu;
        w.huber_delta = self.cfg.huber_delta;
        w.depth_space = self.cfg.depth_residual_space;
        for &i in kfs {
            let k = &self.state.keyframes[i];
            w.frames.push(k.frame_id);
            w.poses.push(k.pose);
            w.patches.extend_from_slice(&k.patches);
        }
        for &a in kfs {
            let ka = &self.state.keyframes[a];
            let ids: HashSet<u32> = ka.patches.iter().map(|p| p.patch_id).collect();
            for &b in kfs {
                if a == b {
                    continue;
                }
                let fb = self.state.keyframes[b].frame_id;
                for &ei in self.index.edges(ka.frame_id, fb) {
                    let e = &self.bundle.edges[ei];
                    if ids.contains(&e.patch_id) && !self.masked(fb, &e.observed) {
                        w.edges.push(to_ba_edge(e));
                    }
                }
            }
            if self.cfg.mu > 0.0 {
                if let Some(alpha) = ka.alpha {
                    for p in &ka.patches {
                        if let Some(&d) = self.index.prior_lookup.get(&(p.frame_id, p.patch_id)) {
                            if d > 0.0 && d.is_finite() {
                                w.priors.push(DepthPrior {
                                    frame_id: p.frame_id,
                                    patch_id: p.patch_id,
                                    prior_depth: d,
                                    frame_scale: 1.0 / alpha,
                                });
                            }
                        }
                    }
                }
            }
        }
        w.fixed_frames = fixed.iter().copied().collect();
        w
    }

    fn write_back(&mut self, kfs: &[usize], w: &BaWindow) {
        let mut it = w.patches.iter();
        for (slot, &i) in kfs.iter().enumerate() {
            let k = &mut self.state.keyframes[i];
            k.pose = w.poses[slot];
            for p in k.patches.iter_mut() {
                *p = *it.next().unwrap();
            }
        }
    }

    /// `α_i = median(prior of frame i at the reprojections of the latest three keyframes' patches)
    /// / median(depth of those patches seen from frame i)`.
    fn compute_alpha(&self, kf: usize) -> Option<f64> {
        let target = &self.state.keyframes[kf];
        let mut num = Vec::new();
        let mut inv = Vec::new();
        for src in self.state.keyframes[kf.saturating_sub(3)..kf].iter() {
            let rel = Pose::relative(&src.pose, &target.pose);
            let by_id: HashMap<u32, &Patch> = src.patches.iter().map(|p| (p.patch_id, p)).collect();
            for &ei in self.index.edges(src.frame_id, target.frame_id) {
                let e = &self.bundle.edges[ei];
                let Some(p) = by_id.get(&e.patch_id) else { continue };
                if !(e.dst_prior_depth > 0.0 && e.dst_prior_depth.is_finite()) || self.masked(target.frame_id, &e.observed) {
                    continue;
                }
                let x = rel.transform_point(&(self.state.intrinsics.ray(&p.center) / p.inv_depth));
                if x.z > 0.0 {
                    num.push(e.dst_prior_depth);
                    inv.push(1.0 / x.z);
                }
            }
        }
        align_prior_scale(&num, &inv, self.cfg.alpha_denominator).ok()
    }

    fn predict_pose(&self, pos: usize) -> Pose {
        let last = pos.checked_sub(1).and_then(|p| self.state.frame_pose(p));
        let prev = pos.checked_sub(2).and_then(|p| self.state.frame_pose(p));
        match (last, prev) {
            (Some(l), Some(p)) => l.compose(&p.inverse()).compose(&l),
            (Some(l), None) => l,
            _ => Pose::identity(),
        }
    }

    fn window_range(&self, end: usize) -> Vec<usize> {
        (end.saturating_sub(self.cfg.window_size)..end).collect()
    }

    fn solve_window(&mut self, kfs: &[usize]) -> Result<BaWindow, BaError> {
        let fixed: Vec<u32> = kfs.iter().take(2).map(|&i| self.state.keyframes[i].frame_id).collect();
        let mut w = self.build_window(kfs, &fixed);
        let opts = SolveOptions { max_iterations: self.cfg.ba_iterations, ..Default::default() };
        solve(&mut w, &opts)?;
        self.write_back(kfs, &w);
        Ok(w)
    }

    /// Register the frame at bundle position `pos` (frames must be processed in order).
    pub fn process_frame(&mut self, pos: usize) -> Result<(), PipelineError> {
        let fid = self.bundle.frames[pos].id;
        let pred = self.predict_pose(pos);
        let cands: Vec<PatchCandidate> = self.index.patches_by_frame[pos].iter().map(|&i| self.bundle.patches[i]).collect();
        let mask = if self.cfg.use_masks { self.bundle.masks.get(&fid) } else { None };
        let sampled = match sample_patches(fid, &cands, mask, self.cfg.patches_per_frame, self.cfg.seed) {
            Ok(v) => v,
            Err(PipelineError::FullyMasked(f)) => {
                self.state.events.push(Event::FullyMasked { frame: f });
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        let recent: Vec<f64> = self.state.keyframes[self.state.keyframes.len().saturating_sub(3)..]
            .iter()
            .flat_map(|k| k.patches.iter().map(|p| 1.0 / p.inv_depth))
            .collect();
        let fallback_depth = median(&recent).unwrap_or(1.0);

        self.state.keyframes.push(Keyframe { frame_id: fid, pose: pred, patches: Vec::new(), alpha: None });
        self.state.frames[pos].status = FrameStatus::Keyframe;
        let kf = self.state.keyframes.len() - 1;
        let kfs = self.window_range(kf + 1);
        self.track(&kfs);
        let alpha = if self.cfg.mu > 0.0 { self.compute_alpha(kf) } else { None };
        let patches = sampled
            .iter()
            .map(|c| {
                let depth = match (alpha, self.index.prior_lookup.get(&(fid, c.patch_id))) {
                    (Some(a), Some(&d)) if d > 0.0 && d.is_finite() => d / a,
                    _ => fallback_depth,
                };
                Patch { frame_id: fid, patch_id: c.patch_id, center: c.center, inv_depth: 1.0 / depth, footprint: self.cfg.patch_footprint }
            })
            .collect();
        self.state.keyframes[kf].patches = patches;
        self.state.keyframes[kf].alpha = alpha;

        let result = self.solve_window(&kfs);
        match result {
            Ok(w) => {
                let med = frame_median_residual(&w, fid);
                if med > self.cfg.tracking_lost_px {
                    self.mark_lost(pos, kf, pred, med);
                }
            }
            Err(BaError::SingularSystem { lambda }) => return Err(BaError::SingularSystem { lambda }.into()),
            Err(_) => self.mark_lost(pos, kf, pred, f64::INFINITY),
        }

        self.keyframe_decision();
        if let Some(c) = self.feed_descriptor(pos) {
            if self.cfg.loop_closure {
                let q = self.state.keyframes.len() - 1;
                if self.state.keyframes[q].frame_id == fid {
                    self.close_loop(q, c)?;
                }
            }
        }
        Ok(())
    }

    /// Pose-only registration of the newest keyframe against the existing map, so that its
    /// prior alignment scale is computed from a registered rather than a predicted pose.
    fn track(&mut self, kfs: &[usize]) {
        let (&newest, rest) = kfs.split_last().unwrap();
        let fid = self.state.keyframes[newest].frame_id;
        let fixed: Vec<u32> = rest.iter().map(|&i| self.state.keyframes[i].frame_id).collect();
        let mut w = self.build_window(kfs, &fixed);
        w.priors.clear();
        let opts = SolveOptions { max_iterations: self.cfg.ba_iterations, freeze_depths: true, ..Default::default() };
        if solve(&mut w, &opts).is_ok() {
            self.state.keyframes[newest].pose = *w.pose(fid).unwrap();
        }
    }

    fn mark_lost(&mut self, pos: usize, kf: usize, pred: Pose, median_residual: f64) {
        self.state.keyframes[kf].pose = pred;
        self.state.frames[pos].tracking_lost = true;
        self.state.events.push(Event::TrackingLost { frame: self.state.frames[pos].frame_id, median_residual });
    }

    /// Drop the newest-but-one keyframe when it moved too little relative to the keyframe before it.
    fn keyframe_decision(&mut self) {
        let n = self.state.keyframes.len();
        if n < 3 {
            return;
        }
        let (prev, cand) = (&self.state.keyframes[n - 3], &self.state.keyframes[n - 2]);
        let Some(flow) = mean_flow(self.bundle, &self.index, prev.frame_id, cand.frame_id, self.cfg.use_masks) else {
            return;
        };
        if flow >= self.cfg.keyframe_flow_px {
            return;
        }
        let relative = cand.pose.compose(&prev.pose.inverse());
        let anchor = prev.frame_id;
        let pos = self.index.frame_pos[&cand.frame_id];
        self.state.frames[pos].status = FrameStatus::Anchored { anchor, relative };
        // frames anchored to the removed keyframe follow it to the new anchor
        let removed = cand.frame_id;
        for f in self.state.frames.iter_mut() {
            if let FrameStatus::Anchored { anchor: a, relative: r } = f.status {
                if a == removed {
                    f.status = FrameStatus::Anchored { anchor, relative: r.compose(&relative) };
                }
            }
        }
        self.state.keyframes.remove(n - 2);
    }

    /// Query, confirm and store the descriptor of the frame at `pos`.
    fn feed_descriptor(&mut self, pos: usize) -> Option<LoopCandidate> {
        let fid = self.bundle.frames[pos].id;
        let d = *self.descriptors.get(&fid)?;
        let cand = self.store.query(d, self.cfg.loop_exclusion);
        let confirmed = self.confirmer.push(fid, cand);
        if let Err(e) = self.store.add(d) {
            log::warn!("descriptor of frame {fid} not stored: {e}");
        }
        if let Some(c) = confirmed {
            self.state.events.push(Event::LoopDetected { query: c.query_frame, matched: c.match_frame, similarity: c.similarity });
        }
        confirmed
    }

    /// Loop edge by triangulation and similarity alignment, SIM(3) pose-graph optimization over all
    /// keyframes with the query fixed, scale re-absorption, then one settling BA on the query's window.
    pub fn close_loop(&mut self, q: usize, cand: LoopCandidate) -> Result<(), PipelineError> {
        let kfs = self.window_range(q + 1);
        let start = kfs[0];
        let query = self.state.keyframes[q].frame_id;
        let reject = |s: &mut Self, reason: &str| {
            s.state.events.push(Event::LoopRejected { query, matched: cand.match_frame, reason: reason.to_string() });
            Ok(())
        };
        let Some(m) = (0..start).min_by_key(|&i| (self.state.keyframes[i].frame_id as i64 - cand.match_frame as i64).abs())
        else {
            return reject(self, "match keyframe lies inside the current window");
        };
        let mk = &self.state.keyframes[m];
        let mk_id = mk.frame_id;
        let k = self.state.intrinsics;
        let g_q = self.state.keyframes[q].pose;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for p in &mk.patches {
            let mut views = Vec::new();
            for &j in &kfs {
                let kj = &self.state.keyframes[j];
                for &ei in self.index.edges(mk.frame_id, kj.frame_id) {
                    let e = &self.bundle.edges[ei];
                    if e.patch_id == p.patch_id && !self.masked(kj.frame_id, &e.observed) {
                        views.push((kj.pose, e.observed));
                    }
                }
            }
            let Some(x) = triangulate_point(&k, &views) else { continue };
            let xq = g_q.transform_point(&x);
            if xq.z <= 0.0 {
                continue;
            }
            src.push(k.ray(&p.center) / p.inv_depth);
            dst.push(xq);
        }
        if src.len() < self.cfg.loop_min_points {
            return reject(self, &format!("{} co-visible points, need {}", src.len(), self.cfg.loop_min_points));
        }
        let Ok(mut al) = align_points(&src, &dst, true) else { return reject(self, "degenerate point configuration") };
        // badly triangulated far points dominate a plain fit; drop them by depth-relative residual and refit
        for _ in 0..5 {
            let rel: Vec<f64> =
                src.iter().zip(&dst).map(|(s, d)| (d - al.transform.transform_point(s)).norm() / d.norm()).collect();
            let cut = 2.0 * median(&rel).unwrap_or(f64::INFINITY);
            let keep: Vec<usize> = (0..src.len()).filter(|&i| rel[i] <= cut).collect();
            if keep.len() == src.len() || keep.len() < self.cfg.loop_min_points {
                break;
            }
            src = keep.iter().map(|&i| src[i]).collect();
            dst = keep.iter().map(|&i| dst[i]).collect();
            match align_points(&src, &dst, true) {
                Ok(a) => al = a,
                Err(_) => return reject(self, "degenerate point configuration"),
            }
        }
        let loop_transform = self.refine_loop_edge(m, &kfs, &al.transform);

        let ids = self.state.keyframe_ids();
        let poses: Vec<Pose> = self.state.keyframes.iter().map(|k| k.pose).collect();
        let mut graph = lift_trajectory(&ids, &poses);
        for n in graph.nodes.iter_mut() {
            n.fixed = n.frame_id == query;
        }
        let mut e = Sim3Edge::new(mk_id, query, loop_transform, EdgeKind::Loop);
        e.information *= self.cfg.loop_information;
        graph.edges.push(e);
        let report = graph.optimize(&OptimizeOptions::default())?;

        let scales: HashMap<u32, f64> = graph.nodes.iter().map(|n| (n.frame_id, n.pose.scale)).collect();
        let mut patches: Vec<Patch> = self.state.keyframes.iter().flat_map(|k| k.patches.iter().copied()).collect();
        let corrected = apply_correction(&mut graph, &mut patches);
        let mut it = patches.into_iter();
        for (k, pose) in self.state.keyframes.iter_mut().zip(corrected) {
            k.pose = pose;
            for p in k.patches.iter_mut() {
                *p = it.next().unwrap();
            }
        }
        self.state.rescale_anchors(&scales);
        self.state.events.push(Event::Pgo {
            query,
            keyframe: mk_id,
            points: src.len(),
            alignment_rmse: al.rmse,
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            iterations: report.iterations,
            loop_residual_before: report.loop_residuals_before.last().copied().unwrap_or(0.0),
            loop_residual_after: report.loop_residuals_after.last().copied().unwrap_or(0.0),
        });
        self.state.pose_graph = Some(graph);
        match self.solve_window(&kfs) {
            Ok(_) | Err(BaError::NotEnoughConstraints(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Pose-only reprojection refinement of a loop edge. The match keyframe's patches, rescaled by
    /// the similarity's scale, are resected against the fixed current window. Falls back to the
    /// initial similarity when the solve fails.
    fn refine_loop_edge(&self, m: usize, kfs: &[usize], init: &SimPose) -> SimPose {
        let q = *kfs.last().unwrap();
        let g_q = self.state.keyframes[q].pose;
        let mk = &self.state.keyframes[m];
        let s = init.scale;
        let g_m = Pose::new(init.rotation, init.translation).inverse().compose(&g_q);
        let mut w = self.build_window(kfs, &[]);
        w.fixed_frames = w.frames.iter().copied().collect();
        w.priors.clear();
        w.frames.push(mk.frame_id);
        w.poses.push(g_m);
        w.patches.extend(mk.patches.iter().map(|p| Patch { inv_depth: p.inv_depth / s, ..*p }));
        let ids: HashSet<u32> = mk.patches.iter().map(|p| p.patch_id).collect();
        for &j in kfs {
            let fj = self.state.keyframes[j].frame_id;
            for &ei in self.index.edges(mk.frame_id, fj) {
                let e = &self.bundle.edges[ei];
                if ids.contains(&e.patch_id) && !self.masked(fj, &e.observed) {
                    w.edges.push(to_ba_edge(e));
                }
            }
        }
        let opts = SolveOptions { max_iterations: 20, freeze_depths: true, ..Default::default() };
        if solve(&mut w, &opts).is_err() {
            return *init;
        }
        let g_m = *w.pose(mk.frame_id).unwrap();
        let rel = g_q.compose(&g_m.inverse());
        SimPose::new(s, rel.rotation, rel.translation)
    }

    /// Process every remaining frame.
    pub fn run_to_end(&mut self) -> Result<(), PipelineError> {
        if !self.is_initialized() {
            self.initialize()?;
        }
        while self.next < self.bundle.frames.len() {
            self.process_frame(self.next)?;
            self.next += 1;
        }
        Ok(())
    }

    /// Replay loop detection over the finished trajectory and close the first confirmed loop
    /// whose query is a keyframe. Returns the closed candidate, if any.
    pub fn replay_loop_closure(&mut self) -> Result<Option<LoopCandidate>, PipelineError> {
        let mut store = DescriptorStore::new(self.cfg.loop_threshold);
        let mut confirmer = LoopConfirmer::new(self.cfg.loop_streak, self.cfg.loop_tolerance, self.cfg.loop_cooldown);
        for f in &self.bundle.frames {
            let Some(d) = self.descriptors.get(&f.id).copied() else { continue };
            let c = confirmer.push(f.id, store.query(d, self.cfg.loop_exclusion));
            let _ = store.add(d);
            if let Some(c) = c {
                if let Some(q) = self.kf_index(c.query_frame) {
                    self.close_loop(q, c)?;
                    return Ok(Some(c));
                }
            }
        }
        Ok(None)
    }

    pub fn trajectory(&self) -> Trajectory {
        self.state.trajectory()
    }
}

fn to_ba_edge(e: &crate::bundle::EdgeRecord) -> CorrespondenceEdge {
    CorrespondenceEdge {
        src_frame: e.src_frame,
        patch_id: e.patch_id,
        dst_frame: e.dst_frame,
        observed: e.observed,
        confidence: e.confidence,
    }
}

fn frame_median_residual(w: &BaWindow, frame: u32) -> f64 {
    let mut r = Vec::new();
    for e in w.edges.iter().filter(|e| e.src_frame == frame || e.dst_frame == frame) {
        let (Some(gi), Some(gj), Some(p)) = (w.pose(e.src_frame), w.pose(e.dst_frame), w.patch(e.src_frame, e.patch_id))
        else {
            continue;
        };
        if let Ok(px) = reproject_patch(&w.intrinsics, gi, gj, &p.center, p.inv_depth) {
            r.push((px - e.observed).norm());
        }
    }
    median(&r).unwrap_or(0.0)
}

/// Stretch the keyframe trajectory so the local scale grows geometrically from 1 to `total`
/// at the last keyframe: each inter-keyframe translation and each keyframe's depths are multiplied
/// by its local factor. Models accumulated monocular scale drift.
pub fn inject_scale_drift(state: &mut ReconstructionState, total: f64) {
    let n = state.keyframes.len();
    if n < 2 {
        return;
    }
    let factor = |i: usize| total.powf(i as f64 / (n - 1) as f64);
    let centers: Vec<Vector3<f64>> = state.keyframes.iter().map(|k| k.pose.center()).collect();
    let mut c = centers[0];
    let mut scales = HashMap::new();
    for i in 0..n {
        let s = factor(i);
        if i > 0 {
            c += (centers[i] - centers[i - 1]) * s;
        }
        let k = &mut state.keyframes[i];
        k.pose = Pose::new(k.pose.rotation, -(k.pose.rotation * c));
        for p in k.patches.iter_mut() {
            p.inv_depth /= s;
        }
        scales.insert(k.frame_id, 1.0 / s);
    }
    state.rescale_anchors(&scales);
}

/// Initialize, process every frame and post-refine.
pub fn run(bundle: &DatasetBundle, cfg: PipelineConfig) -> Result<ReconstructionState, PipelineError> {
    let mode = cfg.post_refine;
    let mut p = Pipeline::new(bundle, cfg)?;
    p.run_to_end()?;
    match post_refine(&mut p, mode) {
        Ok(_) | Err(PipelineError::RefinementDiverged { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(p.state)
}
