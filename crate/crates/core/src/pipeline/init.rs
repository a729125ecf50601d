//! Initialization: init-frame selection, two-view bootstrap and focal search.

use std::collections::HashSet;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};

use super::{sample_patches, PipelineConfig, PipelineError};
use crate::ba::{median, solve, BaWindow, CorrespondenceEdge, Patch, SolveOptions};
use crate::bundle::{BundleIndex, DatasetBundle, PatchCandidate};
use crate::geometry::{project, reproject_patch, CameraIntrinsics, Pose};

const FOCAL_GRID: usize = 20;
const FOCAL_RANGE: (f64, f64) = (0.3, 3.0);
const GOLDEN_ITERATIONS: usize = 50;
const INIT_BA_ITERATIONS: usize = 40;

pub(crate) fn is_masked(bundle: &DatasetBundle, use_masks: bool, frame: u32, px: &Vector2<f64>) -> bool {
    use_masks && bundle.masks.get(&frame).is_some_and(|m| m.is_masked(px))
}

/// Mean correspondence displacement `‖observed − center‖` over the edges from `src` candidates into `dst`.
pub fn mean_flow(bundle: &DatasetBundle, index: &BundleIndex, src: u32, dst: u32, use_masks: bool) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &ei in index.edges(src, dst) {
        let e = &bundle.edges[ei];
        let Some(&pi) = index.patch_lookup.get(&(src, e.patch_id)) else { continue };
        let c = bundle.patches[pi].center;
        if is_masked(bundle, use_masks, src, &c) || is_masked(bundle, use_masks, dst, &e.observed) {
            continue;
        }
        sum += (e.observed - c).norm();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Greedy scan from the first frame, accepting a frame once its mean flow from the last accepted frame
/// reaches `flow_threshold`.
pub fn select_init_frames(
    bundle: &DatasetBundle,
    index: &BundleIndex,
    n_init: usize,
    flow_threshold: f64,
    use_masks: bool,
) -> Result<Vec<u32>, PipelineError> {
    let Some(first) = bundle.frames.first() else {
        return Err(PipelineError::InsufficientParallax { accepted: 0, required: n_init });
    };
    let mut accepted = vec![first.id];
    for f in &bundle.frames[1..] {
        if accepted.len() == n_init {
            break;
        }
        let last = *accepted.last().unwrap();
        if mean_flow(bundle, index, last, f.id, use_masks).is_some_and(|fl| fl >= flow_threshold) {
            accepted.push(f.id);
        }
    }
    if accepted.len() < n_init {
        return Err(PipelineError::InsufficientParallax { accepted: accepted.len(), required: n_init });
    }
    Ok(accepted)
}

/// Sampled patches and correspondences among the initialization frames.
#[derive(Debug, Clone)]
pub struct InitContext {
    pub frames: Vec<u32>,
    pub patches: Vec<Vec<PatchCandidate>>,
    pub edges: Vec<CorrespondenceEdge>,
    pub width: u32,
    pub height: u32,
}

impl InitContext {
    pub fn new(bundle: &DatasetBundle, index: &BundleIndex, frames: &[u32], cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let mut patches = Vec::with_capacity(frames.len());
        for &f in frames {
            let pos = index.frame_pos[&f];
            let cands: Vec<PatchCandidate> = index.patches_by_frame[pos].iter().map(|&i| bundle.patches[i]).collect();
            let mask = if cfg.use_masks { bundle.masks.get(&f) } else { None };
            patches.push(sample_patches(f, &cands, mask, cfg.patches_per_frame, cfg.seed)?);
        }
        let mut edges = Vec::new();
        for (a, pa) in frames.iter().zip(&patches) {
            let ids: HashSet<u32> = pa.iter().map(|p| p.patch_id).collect();
            for b in frames {
                if a == b {
                    continue;
                }
                for &ei in index.edges(*a, *b) {
                    let e = &bundle.edges[ei];
                    if ids.contains(&e.patch_id) && !is_masked(bundle, cfg.use_masks, *b, &e.observed) {
                        edges.push(CorrespondenceEdge {
                            src_frame: e.src_frame,
                            patch_id: e.patch_id,
                            dst_frame: e.dst_frame,
                            observed: e.observed,
                            confidence: e.confidence,
                        });
                    }
                }
            }
        }
        Ok(Self { frames: frames.to_vec(), patches, edges, width: bundle.width, height: bundle.height })
    }

    fn center(&self, frame_pos: usize, patch_id: u32) -> Option<Vector2<f64>> {
        self.patches[frame_pos].iter().find(|p| p.patch_id == patch_id).map(|p| p.center)
    }

    fn pair(&self, a: usize, b: usize) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let (fa, fb) = (self.frames[a], self.frames[b]);
        self.edges
            .iter()
            .filter(|e| e.src_frame == fa && e.dst_frame == fb)
            .filter_map(|e| self.center(a, e.patch_id).map(|c| (c, e.observed)))
            .collect()
    }
}

/// Bootstrapped initial map.
#[derive(Debug, Clone)]
pub struct InitSolution {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<u32>,
    pub poses: Vec<Pose>,
    pub patches: Vec<Vec<Patch>>,
    /// Median reprojection error (px) after BA.
    pub score: f64,
}

impl InitSolution {
    pub(crate) fn window(&self, ctx: &InitContext, huber: f64) -> BaWindow {
        let mut w = BaWindow::new(self.intrinsics);
        w.huber_delta = huber;
        w.frames = self.frames.clone();
        w.poses = self.poses.clone();
        w.patches = self.patches.iter().flatten().copied().collect();
        w.edges = ctx.edges.clone();
        w.fixed_frames.insert(self.frames[0]);
        if let Some(p) = self.patches[0].first() {
            w.fixed_patches.insert((p.frame_id, p.patch_id));
        }
        w
    }

    fn absorb(&mut self, w: &BaWindow) {
        self.intrinsics = w.intrinsics;
        self.poses = w.poses.clone();
        let mut it = w.patches.iter();
        for ps in self.patches.iter_mut() {
            for p in ps.iter_mut() {
                *p = *it.next().unwrap();
            }
        }
    }
}

/// Median reprojection error of `edges` in a window.
pub(crate) fn median_residual(w: &BaWindow) -> f64 {
    let mut r = Vec::with_capacity(w.edges.len());
    for e in &w.edges {
        let (Some(gi), Some(gj), Some(p)) = (w.pose(e.src_frame), w.pose(e.dst_frame), w.patch(e.src_frame, e.patch_id))
        else {
            continue;
        };
        if let Ok(px) = reproject_patch(&w.intrinsics, gi, gj, &p.center, p.inv_depth) {
            r.push((px - e.observed).norm());
        }
    }
    median(&r).unwrap_or(f64::INFINITY)
}

/// Relative pose `a → b` (unit translation) from the essential matrix of calibrated rays,
/// with depths of the inlier points in both views.
pub(crate) fn essential_pose(rays_a: &[Vector3<f64>], rays_b: &[Vector3<f64>]) -> Option<(Pose, Vec<f64>, Vec<f64>)> {
    let n = rays_a.len();
    if n < 8 {
        return None;
    }
    let mut a = DMatrix::zeros(n, 9);
    for (i, (xa, xb)) in rays_a.iter().zip(rays_b).enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = xb[r] * xa[c];
            }
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = eig.eigenvectors.column(imin);
    let e = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, Pose, Vec<f64>, Vec<f64>)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for sign in [1.0, -1.0] {
            let tt = t * sign;
            let mut da = Vec::with_capacity(n);
            let mut db = Vec::with_capacity(n);
            let mut good = 0;
            for (xa, xb) in rays_a.iter().zip(rays_b) {
                match two_view_depths(&r, &tt, xa, xb) {
                    Some((la, lb)) if la > 0.0 && lb > 0.0 => {
                        good += 1;
                        da.push(la);
                        db.push(lb);
                    }
                    _ => {
                        da.push(f64::NAN);
                        db.push(f64::NAN);
                    }
                }
            }
            if best.as_ref().is_none_or(|b| good > b.0) {
                let rot = nalgebra::UnitQuaternion::from_matrix(&r);
                best = Some((good, Pose::new(rot, tt), da, db));
            }
        }
    }
    let (good, pose, da, db) = best?;
    (good >= n / 2 && pose.is_finite()).then_some((pose, da, db))
}

/// Depths `(λ_a, λ_b)` with `λ_b x_b ≈ R λ_a x_a + t` (rays normalized to z = 1).
fn two_view_depths(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> Option<(f64, f64)> {
    let u = r * xa;
    let v = -xb;
    let m = Matrix2::new(u.dot(&u), u.dot(&v), u.dot(&v), v.dot(&v));
    let rhs = Vector2::new(-u.dot(t), -v.dot(t));
    let det = m.determinant();
    if det.abs() < 1e-12 * m[(0, 0)] * m[(1, 1)] {
        return None;
    }
    let s = m.try_inverse()? * rhs;
    Some((s[0], s[1]))
}

/// Depth along the host ray (in the host camera) best explaining the observations, by linear least squares.
pub(crate) fn triangulate_depth(
    k: &CameraIntrinsics,
    host: &Pose,
    center: &Vector2<f64>,
    views: &[(Pose, Vector2<f64>)],
) -> Option<f64> {
    let ray = k.ray(center);
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, obs) in views {
        let rel = Pose::relative(host, g);
        let a = rel.translation;
        let b = rel.rotation * ray;
        let r = k.ray(obs);
        let ca = r.cross(&a);
        let cb = r.cross(&b);
        num -= cb.dot(&ca);
        den += cb.dot(&cb);
    }
    if den < 1e-18 {
        return None;
    }
    let d = num / den;
    (d.is_finite() && d > 0.0).then_some(d)
}

/// World point closest to all viewing rays.
pub(crate) fn triangulate_point(k: &CameraIntrinsics, views: &[(Pose, Vector2<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (g, obs) in views {
        let d = (g.rotation.inverse() * k.ray(obs)).normalize();
        let p = Matrix3::identity() - d * d.transpose();
        let c = g.center();
        a += p;
        b += p * c;
    }
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    // nearly parallel rays leave the depth direction unconstrained
    if !(lo > 1e-6 * hi) {
        return None;
    }
    let x = a.try_inverse()? * b;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Two-view chain bootstrap followed by a μ = 0 bundle adjustment at fixed intrinsics.
pub fn reconstruct(ctx: &InitContext, k: &CameraIntrinsics, huber: f64) -> Option<InitSolution> {
    let n = ctx.frames.len();
    let mut poses = vec![Pose::identity(); n];
    let mut prev_median_b: Option<f64> = None;
    for i in 1..n {
        let pairs = ctx.pair(i - 1, i);
        let ra: Vec<Vector3<f64>> = pairs.iter().map(|p| k.ray(&p.0)).collect();
        let rb: Vec<Vector3<f64>> = pairs.iter().map(|p| k.ray(&p.1)).collect();
        let (rel, da, db) = essential_pose(&ra, &rb)?;
        let ma = median(&da.iter().copied().filter(|d| d.is_finite()).collect::<Vec<_>>())?;
        let mb = median(&db.iter().copied().filter(|d| d.is_finite()).collect::<Vec<_>>())?;
        let scale = prev_median_b.map_or(1.0, |m| m / ma);
        prev_median_b = Some(mb * scale);
        let rel = Pose::new(rel.rotation, rel.translation * scale);
        poses[i] = rel.compose(&poses[i - 1]);
    }

    let mut patches = Vec::with_capacity(n);
    let mut all_depths = Vec::new();
    for (a, cands) in ctx.patches.iter().enumerate() {
        let fa = ctx.frames[a];
        let mut ps = Vec::with_capacity(cands.len());
        for c in cands {
            let views: Vec<(Pose, Vector2<f64>)> = ctx
                .edges
                .iter()
                .filter(|e| e.src_frame == fa && e.patch_id == c.patch_id)
                .filter_map(|e| ctx.frames.iter().position(|&f| f == e.dst_frame).map(|b| (poses[b], e.observed)))
                .collect();
            let d = triangulate_depth(k, &poses[a], &c.center, &views);
            if let Some(d) = d {
                all_depths.push(d);
            }
            ps.push((c, d));
        }
        patches.push(ps);
    }
    let fallback = median(&all_depths)?;
    // frame 0's gauge patch should carry a triangulated depth
    let mut patches: Vec<Vec<Patch>> = patches
        .into_iter()
        .map(|ps| {
            let mut v: Vec<(Patch, bool)> = ps
                .into_iter()
                .map(|(c, d)| {
                    (
                        Patch {
                            frame_id: c.frame_id,
                            patch_id: c.patch_id,
                            center: c.center,
                            inv_depth: 1.0 / d.unwrap_or(fallback),
                            footprint: c.footprint,
                        },
                        d.is_some(),
                    )
                })
                .collect();
            v.sort_by_key(|(_, ok)| !ok);
            v.into_iter().map(|(p, _)| p).collect()
        })
        .collect();
    if patches[0].is_empty() {
        return None;
    }
    for ps in patches.iter_mut() {
        ps.retain(|p| p.inv_depth.is_finite() && p.inv_depth > 0.0);
    }

    let mut sol = InitSolution { intrinsics: *k, frames: ctx.frames.clone(), poses, patches, score: f64::INFINITY };
    let mut w = sol.window(ctx, huber);
    let opts = SolveOptions { max_iterations: INIT_BA_ITERATIONS, ..Default::default() };
    solve(&mut w, &opts).ok()?;
    sol.absorb(&w);
    sol.score = median_residual(&w);
    sol.score.is_finite().then_some(sol)
}

/// Median pixel error of the best rotation-only (infinite-homography) fit between consecutive init frames.
pub(crate) fn rotation_only_score(ctx: &InitContext, k: &CameraIntrinsics) -> f64 {
    let mut errs = Vec::new();
    for i in 1..ctx.frames.len() {
        let pairs = ctx.pair(i - 1, i);
        if pairs.len() < 3 {
            continue;
        }
        let ua: Vec<Vector3<f64>> = pairs.iter().map(|p| k.ray(&p.0).normalize()).collect();
        let ub: Vec<Vector3<f64>> = pairs.iter().map(|p| k.ray(&p.1).normalize()).collect();
        let mut h = Matrix3::zeros();
        for (a, b) in ua.iter().zip(&ub) {
            h += b * a.transpose();
        }
        let svd = h.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else { continue };
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * vt;
        for (a, p) in ua.iter().zip(&pairs) {
            match project(k, &(r * a)) {
                Ok(px) => errs.push((px - p.1).norm()),
                Err(_) => errs.push(f64::INFINITY),
            }
        }
    }
    median(&errs).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone)]
pub struct FocalEstimate {
    pub intrinsics: CameraIntrinsics,
    /// Median reprojection error at the chosen focal length.
    pub score: f64,
    /// `(focal, score)` at every evaluated grid point.
    pub grid: Vec<(f64, f64)>,
    pub rotation_only_score: f64,
    pub solution: InitSolution,
}

fn degenerate(rotation_only: f64, full: f64) -> bool {
    rotation_only <= 2.0 * full + 0.5
}

/// Focal search over a log grid of `[0.3, 3] × width`, golden-section refinement of the best
/// bracket, then a joint BA polish with the focal length free. Principal point stays at the image center.
pub fn estimate_focal(ctx: &InitContext, huber: f64) -> Result<FocalEstimate, PipelineError> {
    let width = ctx.width as f64;
    let k_of = |f: f64| CameraIntrinsics::centered(f, ctx.width, ctx.height).expect("positive focal");
    let eval = |f: f64| reconstruct(ctx, &k_of(f), huber);
    let score = |s: &Option<InitSolution>| s.as_ref().map_or(f64::INFINITY, |s| s.score);

    let (lo, hi) = (FOCAL_RANGE.0 * width, FOCAL_RANGE.1 * width);
    let fs: Vec<f64> =
        (0..FOCAL_GRID).map(|i| lo * (hi / lo).powf(i as f64 / (FOCAL_GRID - 1) as f64)).collect();
    let mut grid = Vec::with_capacity(FOCAL_GRID);
    let mut best: Option<(usize, InitSolution)> = None;
    let mut rot_best = f64::INFINITY;
    for (i, &f) in fs.iter().enumerate() {
        let s = eval(f);
        let sc = score(&s);
        grid.push((f, sc));
        rot_best = rot_best.min(rotation_only_score(ctx, &k_of(f)));
        if let Some(s) = s {
            if best.as_ref().is_none_or(|b| sc < b.1.score) {
                best = Some((i, s));
            }
        }
    }
    let Some((bi, mut best_sol)) = best else { return Err(PipelineError::DegenerateGeometry) };
    if degenerate(rot_best, best_sol.score) {
        return Err(PipelineError::DegenerateGeometry);
    }

    // golden section in log-focal over the neighbouring grid cells
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = fs[bi.saturating_sub(1)].ln();
    let mut b = fs[(bi + 1).min(FOCAL_GRID - 1)].ln();
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut sc_c = eval(c.exp());
    let mut sc_d = eval(d.exp());
    for _ in 0..GOLDEN_ITERATIONS {
        if score(&sc_c) < score(&sc_d) {
            b = d;
            d = c;
            sc_d = sc_c;
            c = b - phi * (b - a);
            sc_c = eval(c.exp());
        } else {
            a = c;
            c = d;
            sc_c = sc_d;
            d = a + phi * (b - a);
            sc_d = eval(d.exp());
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    for s in [sc_c, sc_d].into_iter().flatten() {
        if s.score <= best_sol.score {
            best_sol = s;
        }
    }

    let mut w = best_sol.window(ctx, huber);
    let opts = SolveOptions { max_iterations: INIT_BA_ITERATIONS, refine_focal: true, ..Default::default() };
    if solve(&mut w, &opts).is_ok() && w.intrinsics.fx > 0.0 && w.intrinsics.validate().is_ok() {
        let polished = median_residual(&w);
        if polished.is_finite() && polished <= best_sol.score * 1.5 + 1e-9 {
            best_sol.absorb(&w);
            best_sol.score = polished;
        }
    }
    Ok(FocalEstimate {
        intrinsics: best_sol.intrinsics,
        score: best_sol.score,
        grid,
        rotation_only_score: rot_best,
        solution: best_sol,
    })
}

/// Bootstrap at a known focal length; still refuses rotation-only initialization windows.
pub fn initialize_with_focal(ctx: &InitContext, k: &CameraIntrinsics, huber: f64) -> Result<InitSolution, PipelineError> {
    let sol = reconstruct(ctx, k, huber).ok_or(PipelineError::DegenerateGeometry)?;
    if degenerate(rotation_only_score(ctx, k), sol.score) {
        return Err(PipelineError::DegenerateGeometry);
    }
    Ok(sol)
}
