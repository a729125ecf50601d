//! Whole-map refinement after the last frame: depth re-estimation with fixed poses alternating
//! with focal-only steps, optionally followed by a global BA over every keyframe.

use std::collections::{HashMap, HashSet};

use crate::ba::{solve, window_cost, BaError, BaWindow, DepthPrior, SolveOptions};

use super::{to_ba_edge, Event, Pipeline, PipelineError, PostRefine};

/// Relative focal change from the initialization estimate beyond which refinement is undone.
pub const MAX_FOCAL_DRIFT: f64 = 0.2;

const RETRIANGULATION_ROUNDS: usize = 10;
const GLOBAL_BA_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub mode: PostRefine,
    pub cost_before: f64,
    pub cost_after: f64,
    pub focal_before: f64,
    pub focal_after: f64,
}

/// Window over every keyframe with all co-visibility edges between keyframes.
fn global_window(p: &Pipeline) -> BaWindow {
    let st = &p.state;
    let mut w = BaWindow::new(st.intrinsics);
    w.mu = p.cfg.mu;
    w.huber_delta = p.cfg.huber_delta;
    w.depth_space = p.cfg.depth_residual_space;
    let mut hosted: HashSet<(u32, u32)> = HashSet::new();
    let mut alpha: HashMap<u32, f64> = HashMap::new();
    for k in &st.keyframes {
        w.frames.push(k.frame_id);
        w.poses.push(k.pose);
        w.patches.extend_from_slice(&k.patches);
        hosted.extend(k.patches.iter().map(|q| (q.frame_id, q.patch_id)));
        if let Some(a) = k.alpha {
            alpha.insert(k.frame_id, a);
        }
    }
    let kf: HashSet<u32> = st.keyframes.iter().map(|k| k.frame_id).collect();
    for e in &p.bundle.edges {
        if e.src_frame != e.dst_frame
            && kf.contains(&e.dst_frame)
            && hosted.contains(&(e.src_frame, e.patch_id))
            && !p.masked(e.dst_frame, &e.observed)
        {
            w.edges.push(to_ba_edge(e));
        }
    }
    if w.mu > 0.0 {
        for q in &w.patches {
            let (Some(&a), Some(&d)) = (alpha.get(&q.frame_id), p.index.prior_lookup.get(&(q.frame_id, q.patch_id))) else {
                continue;
            };
            if d > 0.0 && d.is_finite() {
                w.priors.push(DepthPrior { frame_id: q.frame_id, patch_id: q.patch_id, prior_depth: d, frame_scale: 1.0 / a });
            }
        }
    }
    w
}

fn write_back(p: &mut Pipeline, w: &BaWindow) {
    p.state.intrinsics = w.intrinsics;
    let mut it = w.patches.iter();
    for (k, pose) in p.state.keyframes.iter_mut().zip(&w.poses) {
        k.pose = *pose;
        for q in k.patches.iter_mut() {
            *q = *it.next().unwrap();
        }
    }
}

/// Run the requested refinement. A result whose cost rose or whose focal left the
/// `±20%` band around the initialization estimate is rolled back and reported as
/// [`PipelineError::RefinementDiverged`].
pub fn post_refine(p: &mut Pipeline, mode: PostRefine) -> Result<Option<RefineReport>, PipelineError> {
    if mode == PostRefine::Off || p.state.keyframes.len() < 2 {
        return Ok(None);
    }
    let backup = p.state.clone();
    let mut w = global_window(p);
    let cost_before = window_cost(&w)?;
    let focal_before = w.intrinsics.fx;

    w.fixed_frames = w.frames.iter().copied().collect();
    let depths = SolveOptions { max_iterations: 10, ..Default::default() };
    let focal = SolveOptions { max_iterations: 5, freeze_depths: true, refine_focal: true, ..Default::default() };
    let mut outcome = Ok(());
    for _ in 0..RETRIANGULATION_ROUNDS {
        let before = w.intrinsics.fx;
        outcome = solve(&mut w, &depths).and_then(|_| solve(&mut w, &focal)).map(|_| ());
        if outcome.is_err() || (w.intrinsics.fx - before).abs() <= 1e-9 * before {
            break;
        }
    }
    if outcome.is_ok() && mode == PostRefine::RetriangulateGlobalBa {
        w.fixed_frames = [w.frames[0]].into_iter().collect();
        if let Some(q) = w.patches.first() {
            w.fixed_patches.insert((q.frame_id, q.patch_id));
        }
        let ba = SolveOptions { max_iterations: GLOBAL_BA_ITERATIONS, refine_focal: true, ..Default::default() };
        outcome = solve(&mut w, &ba).map(|_| ());
    }
    let name = mode.to_string();
    let reason = match outcome {
        Err(BaError::NotEnoughConstraints(m)) => Some(m),
        Err(e) => return Err(e.into()),
        Ok(()) => {
            let cost_after = window_cost(&w)?;
            let k0 = p.state.k_init.fx;
            let drift = (w.intrinsics.fx - k0).abs() / k0;
            if !(cost_after <= cost_before) {
                Some(format!("cost rose from {cost_before:.6e} to {cost_after:.6e}"))
            } else if drift > MAX_FOCAL_DRIFT {
                Some(format!("focal moved {:.1}% from the initialization estimate", 100.0 * drift))
            } else {
                write_back(p, &w);
                let r = RefineReport { mode, cost_before, cost_after, focal_before, focal_after: w.intrinsics.fx };
                p.state.events.push(Event::Refine {
                    mode: name,
                    cost_before,
                    cost_after,
                    focal_before,
                    focal_after: r.focal_after,
                });
                return Ok(Some(r));
            }
        }
    };
    let reason = reason.unwrap_or_default();
    log::warn!("post-refinement rolled back: {reason}");
    p.state = backup;
    p.state.events.push(Event::RefinementDiverged { mode: name, reason: reason.clone() });
    Err(PipelineError::RefinementDiverged { reason })
}
