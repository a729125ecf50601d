//! Trajectory metrics: break detection, registration counts, alignment, ATE and RPE.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{align_points, Alignment, GeometryError, Pose, SimPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectories do not cover the same frames: {0}")]
    FrameMismatch(String),
    #[error("fewer than 3 non-collinear common positions")]
    DegenerateCollinear,
}

impl From<GeometryError> for EvalError {
    fn from(_: GeometryError) -> Self {
        EvalError::DegenerateCollinear
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub frame_id: u32,
    /// World-to-camera pose; `None` for unregistered frames.
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    /// Frames `0..n` at the given rate.
    pub fn from_poses(poses: &[Option<Pose>], fps: f64) -> Self {
        let entries = poses
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryEntry { timestamp: i as f64 / fps, frame_id: i as u32, pose: *p })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn registered(&self, i: usize) -> Option<&Pose> {
        self.entries[i].pose.as_ref().filter(|p| p.is_finite())
    }

    pub fn centers(&self) -> Vec<Option<Vector3<f64>>> {
        (0..self.len()).map(|i| self.registered(i).map(|p| p.center())).collect()
    }

    /// Apply a world similarity to every pose: centers map through `s`, orientations rotate with it.
    pub fn transformed(&self, s: &SimPose) -> Trajectory {
        let entries = self
            .entries
            .iter()
            .map(|e| TrajectoryEntry { pose: e.pose.map(|g| transform_pose(&g, s)), ..*e })
            .collect();
        Trajectory { entries }
    }
}

fn transform_pose(g: &Pose, s: &SimPose) -> Pose {
    let c = s.transform_point(&g.center());
    let r = g.rotation * s.rotation.inverse();
    Pose::new(r, -(r * c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakReport {
    pub indices: Vec<usize>,
    /// Normalized step `Δt̂_i` for step `i → i+1` (NaN where undefined).
    pub ratios: Vec<f64>,
    pub k: usize,
    pub threshold: f64,
    pub literal_global: bool,
}

/// Steps `‖t_i − t_{i+1}‖` normalized by the mean of the other steps within `±k` in the same
/// registered run. A break is reported when the ratio exceeds `threshold`. With
/// `literal_global` the ratio is instead compared against `threshold × mean(ratio)`.
pub fn detect_breaks(traj: &Trajectory, k: usize, threshold: f64, literal_global: bool) -> BreakReport {
    let centers = traj.centers();
    let n_steps = centers.len().saturating_sub(1);
    let steps: Vec<Option<f64>> = (0..n_steps)
        .map(|i| match (centers[i], centers[i + 1]) {
            (Some(a), Some(b)) => Some((a - b).norm()),
            _ => None,
        })
        .collect();
    let valid: Vec<f64> = steps.iter().flatten().copied().collect();
    let global_mean = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    let floor = 1e-6 * global_mean;

    let mut ratios = vec![f64::NAN; n_steps];
    for i in 0..n_steps {
        let Some(d) = steps[i] else { continue };
        let mut sum = 0.0;
        let mut count = 0;
        // walk outward, stopping at unregistered gaps
        for dir in [-1i64, 1] {
            for off in 1..=k as i64 {
                let j = i as i64 + dir * off;
                if j < 0 || j >= n_steps as i64 {
                    break;
                }
                match steps[j as usize] {
                    Some(v) => {
                        sum += v;
                        count += 1;
                    }
                    None => break,
                }
            }
        }
        if count == 0 {
            continue;
        }
        let norm = (sum / count as f64).max(floor);
        ratios[i] = if norm > 0.0 { d / norm } else { 0.0 };
    }

    let limit = if literal_global {
        let finite: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
        threshold * finite.iter().sum::<f64>() / finite.len().max(1) as f64
    } else {
        threshold
    };
    let indices = ratios.iter().enumerate().filter(|(_, r)| **r > limit).map(|(i, _)| i).collect();
    BreakReport { indices, ratios, k, threshold, literal_global }
}

fn registered_runs(traj: &Trajectory) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = 0;
    for i in 0..traj.len() {
        if traj.registered(i).is_some() {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    runs
}

/// Length of the largest contiguous registered run.
pub fn count_registered(traj: &Trajectory) -> usize {
    registered_runs(traj).into_iter().max().unwrap_or(0)
}

/// Number of maximal contiguous registered runs.
pub fn count_models(traj: &Trajectory) -> usize {
    registered_runs(traj).len()
}

fn common_centers(est: &Trajectory, reference: &Trajectory) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), EvalError> {
    if est.len() != reference.len() {
        return Err(EvalError::FrameMismatch(format!("{} vs {} entries", est.len(), reference.len())));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, (x, y)) in est.entries.iter().zip(&reference.entries).enumerate() {
        if x.frame_id != y.frame_id {
            return Err(EvalError::FrameMismatch(format!("entry {i}: frame {} vs {}", x.frame_id, y.frame_id)));
        }
        if let (Some(p), Some(q)) = (est.registered(i), reference.registered(i)) {
            a.push(p.center());
            b.push(q.center());
        }
    }
    Ok((a, b))
}

/// Similarity mapping `est` camera centers onto `reference`, over frames registered in both.
pub fn align_sim3(est: &Trajectory, reference: &Trajectory) -> Result<Alignment, EvalError> {
    let (a, b) = common_centers(est, reference)?;
    Ok(align_points(&a, &b, true)?)
}

/// RMSE of camera-center distances after similarity alignment.
pub fn ate_rmse(est: &Trajectory, reference: &Trajectory) -> Result<f64, EvalError> {
    Ok(align_sim3(est, reference)?.rmse)
}

/// RMSE of camera-center distances with no alignment.
pub fn position_rmse(est: &Trajectory, reference: &Trajectory) -> Result<f64, EvalError> {
    let (a, b) = common_centers(est, reference)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok((a.iter().zip(&b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt())
}

/// Translational relative pose error over frame pairs `(i, i+delta)`, after similarity alignment:
/// RMSE of the translation of `(Q_i⁻¹ Q_{i+δ})⁻¹ (P_i⁻¹ P_{i+δ})` with camera-to-world `P` (estimate) and `Q` (reference).
pub fn rpe(est: &Trajectory, reference: &Trajectory, delta: usize) -> Result<f64, EvalError> {
    let al = align_sim3(est, reference)?;
    let est = est.transformed(&al.transform);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..est.len().saturating_sub(delta) {
        let j = i + delta;
        let (Some(pi), Some(pj), Some(qi), Some(qj)) =
            (est.registered(i), est.registered(j), reference.registered(i), reference.registered(j))
        else {
            continue;
        };
        // camera-to-world is the inverse of the stored pose
        let dp = pi.compose(&pj.inverse());
        let dq = qi.compose(&qj.inverse());
        let e = dq.inverse().compose(&dp);
        sum += e.translation.norm_squared();
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::FrameMismatch(format!("no frame pairs {delta} apart registered in both")));
    }
    Ok((sum / count as f64).sqrt())
}
