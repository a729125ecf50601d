use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{descriptors, stream, Layout, SimError, Stream, WorldSpec};
use crate::bundle::{
    DatasetBundle, EdgeRecord, FrameInfo, GroundTruth, GtPatch, Mask, PatchCandidate, PriorRecord,
};
use crate::geometry::{project, CameraIntrinsics, Pose};

const MIN_Z: f64 = 0.5;
const CANDIDATE_MARGIN: f64 = 2.0;
const MASK_DILATION: i64 = 2;
const OBJECT_POINTS: usize = 40;

#[derive(Debug, Clone, Copy)]
struct CameraState {
    center: Vector3<f64>,
    heading: f64,
    pitch: f64,
    roll: f64,
}

fn camera_states(spec: &WorldSpec) -> Vec<CameraState> {
    let mut heading = spec.start_heading_deg.to_radians();
    let mut center = Vector3::zeros();
    let mut travelled = 0.0;
    let bob = |s: f64| {
        let w = spec.bob.wavelength.max(1e-9);
        (
            spec.bob.pitch_deg.to_radians() * (2.0 * PI * s / w).sin(),
            spec.bob.roll_deg.to_radians() * (2.0 * PI * s / (1.7 * w) + 1.0).sin(),
        )
    };
    let record = |center: Vector3<f64>, heading: f64, s: f64| {
        let (pitch, roll) = bob(s);
        CameraState { center, heading, pitch, roll }
    };
    let mut out = vec![record(center, heading, travelled)];
    for seg in &spec.trajectory_script {
        for _ in 0..seg.frames() {
            match *seg {
                super::Segment::Forward { step, .. } => {
                    center += forward(heading) * step;
                    travelled += step;
                }
                super::Segment::Arc { step, yaw_deg, .. } => {
                    heading += yaw_deg.to_radians();
                    center += forward(heading) * step;
                    travelled += step;
                }
                super::Segment::PureRotation { yaw_deg, .. } => heading += yaw_deg.to_radians(),
                super::Segment::Pause { .. } => {}
            }
            out.push(record(center, heading, travelled));
        }
    }
    out
}

fn forward(heading: f64) -> Vector3<f64> {
    Vector3::new(heading.sin(), 0.0, heading.cos())
}

fn right(heading: f64) -> Vector3<f64> {
    Vector3::new(heading.cos(), 0.0, -heading.sin())
}

fn pose_of(s: &CameraState) -> Pose {
    let r_wc = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), s.heading)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), s.pitch)
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), s.roll);
    let r_cw = r_wc.inverse();
    Pose::new(r_cw, -(r_cw * s.center))
}

/// Ground-truth world-to-camera poses of the scripted trajectory.
pub fn trajectory_poses(spec: &WorldSpec) -> Vec<Pose> {
    camera_states(spec).iter().map(pose_of).collect()
}

#[derive(Debug, Clone, Copy)]
struct PathSample {
    pos: Vector3<f64>,
    heading: f64,
    /// Arc length along the real trajectory (negative before the start).
    s: f64,
}

/// Samples every metre along the path, extended before the start and past the end.
fn path_samples(states: &[CameraState]) -> Vec<PathSample> {
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for st in states {
        if pts.last().is_none_or(|p| (p - st.center).norm() > 1e-9) {
            pts.push(st.center);
        }
    }
    let first_heading = states[0].heading;
    let last_heading = states.last().unwrap().heading;
    let mut out = Vec::new();
    for k in (1..=15).rev() {
        out.push(PathSample { pos: pts[0] - forward(first_heading) * k as f64, heading: first_heading, s: -(k as f64) });
    }
    let mut s = 0.0;
    let mut next = 0.0;
    for w in pts.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        let heading = d.x.atan2(d.z);
        while next <= s + len {
            out.push(PathSample { pos: w[0] + d * ((next - s) / len), heading, s: next });
            next += 1.0;
        }
        s += len;
    }
    if pts.len() == 1 {
        out.push(PathSample { pos: pts[0], heading: first_heading, s: 0.0 });
    }
    let end = *pts.last().unwrap();
    for k in 1..=50 {
        out.push(PathSample { pos: end + forward(last_heading) * k as f64, heading: last_heading, s: s + k as f64 });
    }
    out
}

fn horizontal_distance_to_path(p: &Vector3<f64>, path: &[PathSample]) -> f64 {
    path.iter()
        .map(|q| ((p.x - q.pos.x).powi(2) + (p.z - q.pos.z).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn static_landmarks(spec: &WorldSpec, states: &[CameraState], path: &[PathSample], rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let h = spec.camera_height;
    let mut out = Vec::with_capacity(spec.landmark_count);
    match spec.layout {
        Layout::Street { half_width, facade_height, ground_fraction } => {
            while out.len() < spec.landmark_count {
                let smp = path[rng.random_range(0..path.len())];
                let along = rng.random_range(-0.5..0.5);
                let base = smp.pos + forward(smp.heading) * along;
                if rng.random_bool(ground_fraction) {
                    let lateral = rng.random_range(-half_width..half_width);
                    let mut p = base + right(smp.heading) * lateral;
                    p.y = h;
                    out.push(p);
                    continue;
                }
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let lateral = side * (half_width + rng.random_range(0.0..1.0));
                let mut p = base + right(smp.heading) * lateral;
                p.y = h - rng.random_range(0.0..facade_height);
                // facades of one street segment must not intrude into another (inner corners)
                if horizontal_distance_to_path(&p, path) < half_width - 0.3 {
                    continue;
                }
                out.push(p);
            }
        }
        Layout::Plaza { center_x, center_z, radius, facade_height, ground_fraction } => {
            for _ in 0..spec.landmark_count {
                let a = rng.random_range(0.0..2.0 * PI);
                if rng.random_bool(ground_fraction) {
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    out.push(Vector3::new(center_x + r * a.cos(), h, center_z + r * a.sin()));
                } else {
                    let r = radius + rng.random_range(0.0..0.5);
                    out.push(Vector3::new(center_x + r * a.cos(), h - rng.random_range(0.0..facade_height), center_z + r * a.sin()));
                }
            }
        }
        Layout::Sphere { distance, radius } => {
            let c = states[0].center + forward(states[0].heading) * distance;
            for _ in 0..spec.landmark_count {
                let d = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let r = radius * rng.random_range(0.0f64..1.0).cbrt();
                out.push(c + d.normalize() * r);
            }
        }
    }
    out
}

/// Boxes moving at constant velocity, each timed to cross in front of the camera.
fn dynamic_landmarks(
    spec: &WorldSpec,
    states: &[CameraState],
    path: &[PathSample],
    rng: &mut ChaCha8Rng,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut pos = Vec::new();
    let mut vel = Vec::new();
    if spec.dynamic_object_count == 0 {
        return (pos, vel);
    }
    let real: Vec<&PathSample> = path.iter().filter(|p| p.s >= 0.0 && p.s <= path_length(path)).collect();
    let lateral_span = match spec.layout {
        Layout::Street { half_width, .. } => 0.6 * half_width,
        _ => 4.0,
    };
    // cumulative distance per frame, to find when the camera is 20 m short of the anchor
    let mut travelled = vec![0.0];
    for w in states.windows(2) {
        let last = *travelled.last().unwrap();
        travelled.push(last + (w[1].center - w[0].center).norm());
    }
    for _ in 0..spec.dynamic_object_count {
        let smp = real[rng.random_range(0..real.len())];
        let lateral = rng.random_range(-lateral_span..lateral_span);
        let mut anchor = smp.pos + right(smp.heading) * lateral;
        anchor.y = spec.camera_height;
        let frame = travelled.iter().position(|&d| d >= smp.s - 20.0).unwrap_or(0);
        let t_anchor = frame as f64 / spec.fps;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dir = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rng.random_range(-0.5..0.5)) * (right(smp.heading) * sign);
        let v = dir * spec.dynamic_speed;
        for _ in 0..OBJECT_POINTS {
            let offset = Vector3::new(rng.random_range(-0.5..0.5), -rng.random_range(0.0..1.8), rng.random_range(-0.5..0.5));
            pos.push(anchor + offset - v * t_anchor);
            vel.push(v);
        }
    }
    (pos, vel)
}

fn path_length(path: &[PathSample]) -> f64 {
    // samples past the end are offset by whole metres from the true end
    path.iter().filter(|p| p.s >= 0.0).map(|p| p.s).fold(0.0, f64::max) - 50.0
}

/// `scale_t = exp(Σ_{s≤t} ε_s)` with `ε ~ N(0, walk_sigma²)`.
pub fn prior_scale_walk(n_frames: usize, walk_sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if walk_sigma == 0.0 {
        return vec![1.0; n_frames];
    }
    let normal = Normal::new(0.0, walk_sigma).unwrap();
    let mut acc = 0.0;
    (0..n_frames)
        .map(|_| {
            acc += normal.sample(rng);
            acc.exp()
        })
        .collect()
}

/// Multiply each prior by its frame's random-walk scale. Frame ids index the walk directly.
pub fn corrupt_prior_scale(
    priors: &[PriorRecord],
    n_frames: usize,
    walk_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<PriorRecord>, Vec<f64>) {
    let scales = prior_scale_walk(n_frames, walk_sigma, rng);
    let out = priors
        .iter()
        .map(|p| PriorRecord { prior_depth: p.prior_depth * scales[p.frame_id as usize], ..*p })
        .collect();
    (out, scales)
}

fn in_image(k: &CameraIntrinsics, px: &Vector2<f64>, margin: f64) -> bool {
    px.x >= margin && px.y >= margin && px.x < k.width as f64 - margin && px.y < k.height as f64 - margin
}

/// Build the full bundle (ground truth included) for a world.
pub fn generate(spec: &WorldSpec) -> Result<DatasetBundle, SimError> {
    spec.validate()?;
    let k = spec.camera;
    let states = camera_states(spec);
    let poses: Vec<Pose> = states.iter().map(pose_of).collect();
    let n = poses.len();
    let path = path_samples(&states);

    let mut landmarks = static_landmarks(spec, &states, &path, &mut stream(spec.seed, Stream::Landmarks));
    let n_static = landmarks.len();
    let (dyn_pos, dyn_vel) = dynamic_landmarks(spec, &states, &path, &mut stream(spec.seed, Stream::Dynamic));
    let mut velocities = vec![Vector3::zeros(); n_static];
    landmarks.extend(dyn_pos);
    velocities.extend(dyn_vel);
    let at = |l: usize, frame: usize| landmarks[l] + velocities[l] * (frame as f64 / spec.fps);

    let mut cand_rng = stream(spec.seed, Stream::Candidates);
    let mut patches = Vec::new();
    let mut gt_patches = Vec::new();
    let mut masks = BTreeMap::new();
    for (f, g) in poses.iter().enumerate() {
        let mut vis_static = Vec::new();
        let mut vis_dyn = Vec::new();
        let mut mask: Option<Mask> = None;
        for l in 0..landmarks.len() {
            let p = g.transform_point(&at(l, f));
            if p.z <= MIN_Z {
                continue;
            }
            let Ok(px) = project(&k, &p) else { continue };
            let dynamic = l >= n_static;
            if dynamic && in_image(&k, &px, 0.0) {
                let m = mask.get_or_insert_with(|| Mask::empty(k.width, k.height));
                let (cx, cy) = (px.x.floor() as i64, px.y.floor() as i64);
                for dy in -MASK_DILATION..=MASK_DILATION {
                    for dx in -MASK_DILATION..=MASK_DILATION {
                        m.set(cx + dx, cy + dy);
                    }
                }
            }
            if p.z > spec.max_depth || !in_image(&k, &px, CANDIDATE_MARGIN) {
                continue;
            }
            if dynamic {
                vis_dyn.push((l, px, p.z));
            } else {
                vis_static.push((l, px, p.z));
            }
        }
        if let Some(m) = mask {
            masks.insert(f as u32, m);
        }
        let want = spec.candidates_per_frame;
        let n_dyn = ((spec.dynamic_fraction_of_view * want as f64).round() as usize).min(vis_dyn.len());
        let n_stat = (want - n_dyn).min(vis_static.len());
        let mut chosen: Vec<(usize, Vector2<f64>, f64, bool)> = Vec::with_capacity(n_dyn + n_stat);
        let mut pick_d: Vec<usize> = sample(&mut cand_rng, vis_dyn.len(), n_dyn).into_vec();
        pick_d.sort_unstable();
        let mut pick_s: Vec<usize> = sample(&mut cand_rng, vis_static.len(), n_stat).into_vec();
        pick_s.sort_unstable();
        chosen.extend(pick_s.iter().map(|&i| (vis_static[i].0, vis_static[i].1, vis_static[i].2, false)));
        chosen.extend(pick_d.iter().map(|&i| (vis_dyn[i].0, vis_dyn[i].1, vis_dyn[i].2, true)));
        for (pid, (l, px, z, dynamic)) in chosen.into_iter().enumerate() {
            patches.push(PatchCandidate { frame_id: f as u32, patch_id: pid as u32, center: px, footprint: 3 });
            gt_patches.push(GtPatch { frame_id: f as u32, patch_id: pid as u32, landmark: l as u32, true_depth: z, dynamic });
        }
    }

    // Frames revisited much later get long-range edges.
    let heading_of = |g: &Pose| {
        let f = g.rotation.inverse() * Vector3::z();
        f.x.atan2(f.z)
    };
    let mut revisits: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if (i as i64 - j as i64).unsigned_abs() <= spec.edge_radius as u64 {
                continue;
            }
            let close = (poses[i].center() - poses[j].center()).norm() < spec.revisit_radius;
            let dh = (heading_of(&poses[i]) - heading_of(&poses[j]) + PI).rem_euclid(2.0 * PI) - PI;
            if close && dh.abs() < 30f64.to_radians() {
                revisits[i].push(j);
            }
        }
    }

    let exact_priors: Vec<PriorRecord> = gt_patches
        .iter()
        .map(|p| PriorRecord { frame_id: p.frame_id, patch_id: p.patch_id, prior_depth: p.true_depth })
        .collect();
    let (scaled, prior_scales) =
        corrupt_prior_scale(&exact_priors, n, spec.noise.prior_scale_walk_sigma, &mut stream(spec.seed, Stream::ScaleWalk));
    let lognormal = |rng: &mut ChaCha8Rng| {
        if spec.noise.prior_depth_lognormal_sigma > 0.0 {
            (spec.noise.prior_depth_lognormal_sigma * rng.sample::<f64, _>(StandardNormal)).exp()
        } else {
            1.0
        }
    };
    let mut prior_rng = stream(spec.seed, Stream::Prior);
    let priors: Vec<PriorRecord> =
        scaled.into_iter().map(|p| PriorRecord { prior_depth: p.prior_depth * lognormal(&mut prior_rng), ..p }).collect();

    let mut pixel_rng = stream(spec.seed, Stream::Pixel);
    let mut edge_prior_rng = stream(spec.seed, Stream::PriorEdge);
    let mut edges = Vec::new();
    for gp in &gt_patches {
        let i = gp.frame_id as usize;
        let lo = i.saturating_sub(spec.edge_radius as usize);
        let hi = (i + spec.edge_radius as usize).min(n - 1);
        let mut targets: Vec<usize> = (lo..=hi).filter(|&j| j != i).collect();
        targets.extend(&revisits[i]);
        targets.sort_unstable();
        for j in targets {
            let p = poses[j].transform_point(&at(gp.landmark as usize, j));
            if p.z <= MIN_Z {
                continue;
            }
            let Ok(px) = project(&k, &p) else { continue };
            if !in_image(&k, &px, 0.0) {
                continue;
            }
            let mut observed = px;
            if spec.noise.pixel_sigma > 0.0 {
                let s = spec.noise.pixel_sigma;
                observed.x += s * pixel_rng.sample::<f64, _>(StandardNormal);
                observed.y += s * pixel_rng.sample::<f64, _>(StandardNormal);
            }
            edges.push(EdgeRecord {
                src_frame: gp.frame_id,
                patch_id: gp.patch_id,
                dst_frame: j as u32,
                observed,
                confidence: 1.0,
                dst_prior_depth: p.z * prior_scales[j] * lognormal(&mut edge_prior_rng),
            });
        }
    }

    let place_ids: Vec<u64> = states
        .iter()
        .map(|s| descriptors::place_id(&s.center, s.heading, spec.place_cell, spec.heading_bins))
        .collect();
    let gt = GroundTruth {
        intrinsics: k,
        poses,
        landmarks,
        velocities,
        place_ids,
        patches: gt_patches,
        prior_scales,
    };
    let descriptors = descriptors::render_descriptors(
        &gt,
        spec.noise.descriptor_sigma,
        spec.descriptor_dim,
        spec.seed,
        &mut stream(spec.seed, Stream::Descriptor),
    );
    Ok(DatasetBundle {
        width: k.width,
        height: k.height,
        frames: (0..n).map(|f| FrameInfo { id: f as u32, timestamp: f as f64 / spec.fps }).collect(),
        patches,
        edges,
        priors,
        masks,
        descriptors,
        ground_truth: Some(gt),
    })
}
