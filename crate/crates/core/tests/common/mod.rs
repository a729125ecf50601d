#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vidslam::ba::{BaWindow, CorrespondenceEdge, DepthPrior, Patch};
use vidslam::geometry::{CameraIntrinsics, Pose};

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::centered(400.0, 512, 288).unwrap()
}

pub fn look_pose(center: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Pose {
    let r_wc = UnitQuaternion::from_euler_angles(pitch, yaw, roll);
    let r_cw = r_wc.inverse();
    Pose::new(r_cw, -(r_cw * center))
}

pub struct Scene {
    pub window: BaWindow,
    pub gt_poses: Vec<Pose>,
    pub gt_inv_depths: Vec<f64>,
}

/// Small random window: `n_frames` cameras strafing sideways, `per_frame` patches
/// each, every patch observed in every other frame.
pub fn random_scene(rng: &mut ChaCha8Rng, n_frames: usize, per_frame: usize, pixel_sigma: f64) -> Scene {
    let k = camera();
    let mut window = BaWindow::new(k);
    let mut gt_poses = Vec::new();
    for f in 0..n_frames {
        let c = Vector3::new(0.4 * f as f64 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.2..0.2));
        let g = look_pose(c, rng.random_range(-0.08..0.08), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        window.frames.push(f as u32);
        window.poses.push(g);
        gt_poses.push(g);
    }
    let mut gt_inv_depths = Vec::new();
    for f in 0..n_frames {
        for p in 0..per_frame {
            let center = Vector2::new(rng.random_range(60.0..452.0), rng.random_range(40.0..248.0));
            let depth: f64 = rng.random_range(3.0..9.0);
            window.patches.push(Patch { frame_id: f as u32, patch_id: p as u32, center, inv_depth: 1.0 / depth, footprint: 3 });
            gt_inv_depths.push(1.0 / depth);
        }
    }
    let noise = Normal::new(0.0, pixel_sigma.max(1e-300)).unwrap();
    for patch in window.patches.clone() {
        for j in 0..n_frames {
            if j as u32 == patch.frame_id {
                continue;
            }
            let g_i = &gt_poses[patch.frame_id as usize];
            let px = vidslam::geometry::reproject_patch(&k, g_i, &gt_poses[j], &patch.center, patch.inv_depth).unwrap();
            let mut observed = px;
            if pixel_sigma > 0.0 {
                observed += Vector2::new(noise.sample(rng), noise.sample(rng));
            }
            window.edges.push(CorrespondenceEdge {
                src_frame: patch.frame_id,
                patch_id: patch.patch_id,
                dst_frame: j as u32,
                observed,
                confidence: 1.0,
            });
        }
    }
    Scene { window, gt_poses, gt_inv_depths }
}

pub fn exact_priors(scene: &Scene) -> Vec<DepthPrior> {
    scene
        .window
        .patches
        .iter()
        .zip(&scene.gt_inv_depths)
        .map(|(p, d)| DepthPrior { frame_id: p.frame_id, patch_id: p.patch_id, prior_depth: 1.0 / d, frame_scale: 1.0 })
        .collect()
}

/// Forward-mode dual number carrying one directional derivative.
#[derive(Debug, Clone, Copy)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn c(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}
impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}
impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}
impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}

type M3 = [[Dual; 3]; 3];
type V3 = [Dual; 3];

fn m3(m: &Matrix3<f64>) -> M3 {
    let mut out = [[Dual::c(0.0); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = Dual::c(m[(r, c)]);
        }
    }
    out
}

fn mm(a: &M3, b: &M3) -> M3 {
    let mut out = [[Dual::c(0.0); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn mv(a: &M3, v: &V3) -> V3 {
    [0, 1, 2].map(|r| a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2])
}

fn tr(a: &M3) -> M3 {
    let mut out = *a;
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

/// Pose perturbed as `exp(ε e_dir)·G`, exact to first order in ε.
fn perturbed(g: &Pose, dir: Option<usize>) -> (M3, V3) {
    let r = m3(&g.rotation_matrix());
    let t = [Dual::c(g.translation.x), Dual::c(g.translation.y), Dual::c(g.translation.z)];
    let Some(dir) = dir else { return (r, t) };
    let mut w = [0.0; 3];
    let mut rho = [0.0; 3];
    if dir < 3 {
        rho[dir] = 1.0;
    } else {
        w[dir - 3] = 1.0;
    }
    let mut e = [[Dual::c(0.0); 3]; 3];
    let hat = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    for a in 0..3 {
        for b in 0..3 {
            e[a][b] = Dual { v: if a == b { 1.0 } else { 0.0 }, d: hat[a][b] };
        }
    }
    let mut t2 = mv(&e, &t);
    for a in 0..3 {
        t2[a].d += rho[a];
    }
    (mm(&e, &r), t2)
}

#[derive(Clone, Copy, PartialEq)]
enum Var {
    Pose(usize, usize),
    Depth(usize),
}

fn edge_residual(window: &BaWindow, e: &CorrespondenceEdge, var: Option<Var>) -> Option<[Dual; 2]> {
    let k = &window.intrinsics;
    let hi = window.frame_index(e.src_frame)?;
    let hj = window.frame_index(e.dst_frame)?;
    let pk = window.patches.iter().position(|p| p.frame_id == e.src_frame && p.patch_id == e.patch_id)?;
    let dir = |f: usize| match var {
        Some(Var::Pose(ff, c)) if ff == f => Some(c),
        _ => None,
    };
    let (ri, ti) = perturbed(&window.poses[hi], dir(hi));
    let (rj, tj) = perturbed(&window.poses[hj], dir(hj));
    let rji = mm(&rj, &tr(&ri));
    let rti = mv(&rji, &ti);
    let tji = [tj[0] - rti[0], tj[1] - rti[1], tj[2] - rti[2]];
    let patch = &window.patches[pk];
    let ray = [
        Dual::c((patch.center.x - k.cx) / k.fx),
        Dual::c((patch.center.y - k.cy) / k.fy),
        Dual::c(1.0),
    ];
    let d = Dual { v: patch.inv_depth, d: if var == Some(Var::Depth(pk)) { 1.0 } else { 0.0 } };
    let rr = mv(&rji, &ray);
    let p = [rr[0] + tji[0] * d, rr[1] + tji[1] * d, rr[2] + tji[2] * d];
    if p[2].v <= 1e-8 * d.v {
        return None;
    }
    let u = Dual::c(k.fx) * p[0] / p[2] + Dual::c(k.cx) - Dual::c(e.observed.x);
    let v = Dual::c(k.fy) * p[1] / p[2] + Dual::c(k.cy) - Dual::c(e.observed.y);
    Some([u, v])
}

/// Independent dense LM step: Jacobian by forward-mode duals, full normal equations, LU.
pub fn dense_oracle_step(window: &BaWindow, lambda: f64) -> (Vec<[f64; 6]>, Vec<f64>) {
    let mut vars = Vec::new();
    for (f, id) in window.frames.iter().enumerate() {
        if !window.fixed_frames.contains(id) {
            for c in 0..6 {
                vars.push(Var::Pose(f, c));
            }
        }
    }
    for (k, p) in window.patches.iter().enumerate() {
        if !window.fixed_patches.contains(&(p.frame_id, p.patch_id)) {
            vars.push(Var::Depth(k));
        }
    }
    let n = vars.len();
    let mut rows: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for e in &window.edges {
        let Some(r0) = edge_residual(window, e, None) else { continue };
        let norm = (r0[0].v * r0[0].v + r0[1].v * r0[1].v).sqrt();
        let w = e.confidence * if norm <= window.huber_delta { 1.0 } else { window.huber_delta / norm };
        let mut ju = vec![0.0; n];
        let mut jv = vec![0.0; n];
        for (c, var) in vars.iter().enumerate() {
            let r = edge_residual(window, e, Some(*var)).unwrap();
            ju[c] = r[0].d;
            jv[c] = r[1].d;
        }
        rows.push((w, r0[0].v, ju));
        rows.push((w, r0[1].v, jv));
    }
    if window.mu > 0.0 {
        for pr in &window.priors {
            let Some(k) = window.patches.iter().position(|p| p.frame_id == pr.frame_id && p.patch_id == pr.patch_id) else {
                continue;
            };
            let sm = window.mu.sqrt();
            let r = sm * (window.patches[k].inv_depth - 1.0 / (pr.frame_scale * pr.prior_depth));
            let mut j = vec![0.0; n];
            if let Some(c) = vars.iter().position(|v| *v == Var::Depth(k)) {
                j[c] = sm;
            }
            rows.push((1.0, r, j));
        }
    }
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for (w, r, j) in &rows {
        for a in 0..n {
            if j[a] == 0.0 {
                continue;
            }
            g[a] += w * j[a] * r;
            for b in 0..n {
                h[(a, b)] += w * j[a] * j[b];
            }
        }
    }
    for a in 0..n {
        h[(a, a)] = h[(a, a)] * (1.0 + lambda) + lambda * 1e-9;
    }
    let x = h.lu().solve(&(-g)).expect("oracle system singular");
    let mut poses = vec![[0.0; 6]; window.frames.len()];
    let mut depths = vec![0.0; window.patches.len()];
    for (c, var) in vars.iter().enumerate() {
        match var {
            Var::Pose(f, d) => poses[*f][*d] = x[c],
            Var::Depth(k) => depths[*k] = x[c],
        }
    }
    (poses, depths)
}

/// Max over frames of (rotation angle error, translation error) after composing `est` with
/// `gt⁻¹`.
pub fn max_pose_error(est: &[Pose], gt: &[Pose]) -> f64 {
    est.iter()
        .zip(gt)
        .map(|(a, b)| {
            let d = a.compose(&b.inverse());
            d.rotation.angle().max(d.translation.norm())
        })
        .fold(0.0, f64::max)
}
