use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector2};

use super::{
    huber_cost, residual_depth, residual_depth_jacobian, robust_weight, BaError, BaWindow, MIN_INV_DEPTH,
};
use crate::geometry::{reproject_with_jacobians, CameraIntrinsics, GeometryError, Pose, Twist6};

/// How the damped normal equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    /// Eliminate the per-patch inverse depths (scalar Schur complement) first.
    #[default]
    Schur,
    /// Assemble and factor the full system.
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub linear_solver: LinearSolver,
    /// Hold every inverse depth constant (pose-only resection).
    pub freeze_depths: bool,
    /// Refine a shared focal length `fx = fy` along with the structure.
    pub refine_focal: bool,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub relative_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_lambda: 1e-4,
            linear_solver: LinearSolver::Schur,
            freeze_depths: false,
            refine_focal: false,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Confidence times Huber weight per edge at the final state.
    pub edge_weights: Vec<f64>,
    /// Edges whose point fell behind the target camera at the final state.
    pub inactive_edges: Vec<bool>,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

const MAX_LAMBDA: f64 = 1e8;
const DIAG_FLOOR: f64 = 1e-9;
/// Mean squared residual (px²) below which a window counts as exactly solved.
const ABS_COST_FLOOR: f64 = 1e-20;

struct Edge {
    patch: usize,
    host: usize,
    target: usize,
    observed: Vector2<f64>,
    confidence: f64,
}

struct Problem {
    edges: Vec<Edge>,
    centers: Vec<Vector2<f64>>,
    /// (patch index, prior depth, frame scale)
    priors: Vec<(usize, f64, f64)>,
    pose_var: Vec<Option<usize>>,
    depth_var: Vec<Option<usize>>,
    focal_var: Option<usize>,
    n_pose_dims: usize,
    n_depth: usize,
    mu: f64,
    huber: f64,
    space: super::DepthResidualSpace,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    inv_depths: Vec<f64>,
    k: CameraIntrinsics,
}

struct Coupling {
    offset: usize,
    len: usize,
    vals: [f64; 6],
}

struct System {
    b: DMatrix<f64>,
    g_p: DVector<f64>,
    c: Vec<f64>,
    g_d: Vec<f64>,
    couplings: Vec<Vec<Coupling>>,
}

fn add_coupling(list: &mut Vec<Coupling>, offset: usize, len: usize, vals: &[f64]) {
    if let Some(c) = list.iter_mut().find(|c| c.offset == offset) {
        for (a, b) in c.vals.iter_mut().zip(vals) {
            *a += b;
        }
    } else {
        let mut v = [0.0; 6];
        v[..len].copy_from_slice(&vals[..len]);
        list.push(Coupling { offset, len, vals: v });
    }
}

impl Problem {
    fn build(window: &BaWindow, opts: &SolveOptions) -> Result<Self, BaError> {
        let frame_idx: HashMap<u32, usize> = window.frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let patch_idx: HashMap<(u32, u32), usize> =
            window.patches.iter().enumerate().map(|(i, p)| ((p.frame_id, p.patch_id), i)).collect();

        let mut pose_var = vec![None; window.frames.len()];
        let mut next = 0;
        for (i, f) in window.frames.iter().enumerate() {
            if !window.fixed_frames.contains(f) {
                pose_var[i] = Some(next);
                next += 6;
            }
        }
        let focal_var = if opts.refine_focal {
            next += 1;
            Some(next - 1)
        } else {
            None
        };
        let n_pose_dims = next;

        let mut depth_var = vec![None; window.patches.len()];
        let mut n_depth = 0;
        if !opts.freeze_depths {
            for (i, p) in window.patches.iter().enumerate() {
                if !window.fixed_patches.contains(&(p.frame_id, p.patch_id)) {
                    depth_var[i] = Some(n_depth);
                    n_depth += 1;
                }
            }
        }

        let mut edges = Vec::with_capacity(window.edges.len());
        for e in &window.edges {
            let missing = || BaError::UnknownReference(format!("{e:?}"));
            edges.push(Edge {
                patch: *patch_idx.get(&(e.src_frame, e.patch_id)).ok_or_else(missing)?,
                host: *frame_idx.get(&e.src_frame).ok_or_else(missing)?,
                target: *frame_idx.get(&e.dst_frame).ok_or_else(missing)?,
                observed: e.observed,
                confidence: e.confidence,
            });
        }
        let mut priors = Vec::new();
        if window.mu > 0.0 {
            for p in &window.priors {
                if let Some(&k) = patch_idx.get(&(p.frame_id, p.patch_id)) {
                    priors.push((k, p.prior_depth, p.frame_scale));
                }
            }
        }

        Ok(Self {
            edges,
            centers: window.patches.iter().map(|p| p.center).collect(),
            priors,
            pose_var,
            depth_var,
            focal_var,
            n_pose_dims,
            n_depth,
            mu: window.mu,
            huber: window.huber_delta,
            space: window.depth_space,
        })
    }

    fn cost(&self, s: &State) -> f64 {
        let mut cost = 0.0;
        for e in &self.edges {
            let c = &self.centers[e.patch];
            if let Ok(px) =
                crate::geometry::reproject_patch(&s.k, &s.poses[e.host], &s.poses[e.target], c, s.inv_depths[e.patch])
            {
                cost += e.confidence * huber_cost((px - e.observed).norm(), self.huber);
            }
        }
        for &(k, prior, scale) in &self.priors {
            let r = residual_depth(s.inv_depths[k], prior, scale, self.mu, self.space);
            cost += r * r;
        }
        cost
    }

    fn linearize(&self, s: &State) -> System {
        let np = self.n_pose_dims;
        let n_patches = self.centers.len();
        let mut sys = System {
            b: DMatrix::zeros(np, np),
            g_p: DVector::zeros(np),
            c: vec![0.0; n_patches],
            g_d: vec![0.0; n_patches],
            couplings: (0..n_patches).map(|_| Vec::new()).collect(),
        };

        for e in &self.edges {
            let rep = match reproject_with_jacobians(
                &s.k,
                &s.poses[e.host],
                &s.poses[e.target],
                &self.centers[e.patch],
                s.inv_depths[e.patch],
            ) {
                Ok(r) => r,
                Err(GeometryError::BehindCamera) | Err(GeometryError::DepthNonPositive) => continue,
                Err(_) => continue,
            };
            let r = rep.pixel - e.observed;
            let w = e.confidence * robust_weight(r.norm(), self.huber);
            if w == 0.0 {
                continue;
            }
            // Pose-side blocks: (offset, len, 2xlen jacobian columns)
            let mut blocks: [(usize, usize, [Vector2<f64>; 6]); 3] = [(0, 0, [Vector2::zeros(); 6]); 3];
            let mut nb = 0;
            let same = e.host == e.target;
            if let Some(o) = self.pose_var[e.host] {
                if !same {
                    let mut cols = [Vector2::zeros(); 6];
                    for (c, col) in cols.iter_mut().enumerate() {
                        *col = rep.d_pose_i.column(c).into_owned();
                    }
                    blocks[nb] = (o, 6, cols);
                    nb += 1;
                }
            }
            if let Some(o) = self.pose_var[e.target] {
                if !same {
                    let mut cols = [Vector2::zeros(); 6];
                    for (c, col) in cols.iter_mut().enumerate() {
                        *col = rep.d_pose_j.column(c).into_owned();
                    }
                    blocks[nb] = (o, 6, cols);
                    nb += 1;
                }
            }
            if let Some(o) = self.focal_var {
                let mut cols = [Vector2::zeros(); 6];
                cols[0] = rep.d_focal;
                blocks[nb] = (o, 1, cols);
                nb += 1;
            }
            let bm = sys.b.as_mut_slice();
            for a in 0..nb {
                let (oa, la, ref ca) = blocks[a];
                for i in 0..la {
                    sys.g_p[oa + i] += w * ca[i].dot(&r);
                }
                for b in 0..nb {
                    let (ob, lb, ref cb) = blocks[b];
                    for j in 0..lb {
                        let col = &mut bm[(ob + j) * np + oa..][..la];
                        for (x, ci) in col.iter_mut().zip(&ca[..la]) {
                            *x += w * ci.dot(&cb[j]);
                        }
                    }
                }
            }
            if self.depth_var[e.patch].is_some() {
                let jd = rep.d_inv_depth;
                sys.c[e.patch] += w * jd.dot(&jd);
                sys.g_d[e.patch] += w * jd.dot(&r);
                let list = &mut sys.couplings[e.patch];
                for (o, l, cols) in blocks.iter().take(nb) {
                    let mut vals = [0.0; 6];
                    for i in 0..*l {
                        vals[i] = w * cols[i].dot(&jd);
                    }
                    add_coupling(list, *o, *l, &vals);
                }
            }
        }
        for &(k, prior, scale) in &self.priors {
            if self.depth_var[k].is_none() {
                continue;
            }
            let d = s.inv_depths[k];
            let r = residual_depth(d, prior, scale, self.mu, self.space);
            let j = residual_depth_jacobian(d, self.mu, self.space);
            sys.c[k] += j * j;
            sys.g_d[k] += j * r;
        }
        sys
    }

    /// Solve the damped system; returns (pose-side step, per-patch depth steps).
    fn solve_step(&self, sys: &System, lambda: f64, which: LinearSolver) -> Option<(DVector<f64>, Vec<f64>)> {
        let np = self.n_pose_dims;
        let damp = |h: f64| h * (1.0 + lambda) + lambda * DIAG_FLOOR;
        let c_damped: Vec<f64> = sys.c.iter().map(|&c| damp(c)).collect();
        match which {
            LinearSolver::Schur => {
                let mut s = sys.b.clone();
                for i in 0..np {
                    s[(i, i)] = damp(sys.b[(i, i)]);
                }
                let mut rhs = -sys.g_p.clone();
                // column-major: entry (r, c) lives at r + c * np
                let sm = s.as_mut_slice();
                for (k, list) in sys.couplings.iter().enumerate() {
                    if self.depth_var[k].is_none() || list.is_empty() {
                        continue;
                    }
                    let inv_c = 1.0 / c_damped[k];
                    for a in list {
                        for i in 0..a.len {
                            rhs[a.offset + i] += a.vals[i] * inv_c * sys.g_d[k];
                        }
                        for b in list {
                            for j in 0..b.len {
                                let bj = b.vals[j] * inv_c;
                                let col = &mut sm[(b.offset + j) * np + a.offset..][..a.len];
                                for (x, ai) in col.iter_mut().zip(&a.vals[..a.len]) {
                                    *x -= ai * bj;
                                }
                            }
                        }
                    }
                }
                let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
                let mut dd = vec![0.0; sys.c.len()];
                for (k, list) in sys.couplings.iter().enumerate() {
                    if self.depth_var[k].is_none() {
                        continue;
                    }
                    let mut acc = -sys.g_d[k];
                    for a in list {
                        for i in 0..a.len {
                            acc -= a.vals[i] * dp[a.offset + i];
                        }
                    }
                    dd[k] = acc / c_damped[k];
                }
                Some((dp, dd))
            }
            LinearSolver::Dense => {
                let n = np + self.n_depth;
                let mut h = DMatrix::zeros(n, n);
                let mut g = DVector::zeros(n);
                h.view_mut((0, 0), (np, np)).copy_from(&sys.b);
                g.rows_mut(0, np).copy_from(&sys.g_p);
                for (k, list) in sys.couplings.iter().enumerate() {
                    let Some(dv) = self.depth_var[k] else { continue };
                    let row = np + dv;
                    h[(row, row)] = sys.c[k];
                    g[row] = sys.g_d[k];
                    for a in list {
                        for i in 0..a.len {
                            h[(row, a.offset + i)] = a.vals[i];
                            h[(a.offset + i, row)] = a.vals[i];
                        }
                    }
                }
                for i in 0..n {
                    h[(i, i)] = damp(h[(i, i)]);
                }
                let x = h.cholesky()?.solve(&(-g));
                let dp = x.rows(0, np).into_owned();
                let mut dd = vec![0.0; sys.c.len()];
                for (k, dv) in self.depth_var.iter().enumerate() {
                    if let Some(dv) = dv {
                        dd[k] = x[np + dv];
                    }
                }
                Some((dp, dd))
            }
        }
    }

    fn apply(&self, s: &State, dp: &DVector<f64>, dd: &[f64]) -> State {
        let mut out = s.clone();
        for (i, var) in self.pose_var.iter().enumerate() {
            if let Some(o) = var {
                let xi = Twist6::from_iterator(dp.rows(*o, 6).iter().copied());
                out.poses[i] = s.poses[i].retract(&xi);
            }
        }
        if let Some(o) = self.focal_var {
            let f = s.k.fx + dp[o];
            out.k = s.k.with_focal(f.max(1e-3));
        }
        for (k, var) in self.depth_var.iter().enumerate() {
            if var.is_some() {
                out.inv_depths[k] = (s.inv_depths[k] + dd[k]).max(MIN_INV_DEPTH);
            }
        }
        out
    }

    fn residual_count(&self) -> usize {
        2 * self.edges.len() + self.priors.len()
    }
}

fn checked_problem(window: &BaWindow, opts: &SolveOptions) -> Result<Problem, BaError> {
    if window.frames.len() != window.poses.len() {
        return Err(BaError::UnknownReference("frames and poses differ in length".into()));
    }
    let fixed = window.frames.iter().filter(|f| window.fixed_frames.contains(f)).count();
    let needs_scale_gauge = window.mu <= 0.0 && !opts.freeze_depths && window.fixed_patches.is_empty();
    let required_fixed = if needs_scale_gauge { 2 } else { 1 };
    if window.frames.len() < 2 {
        return Err(BaError::NotEnoughConstraints("window needs at least two frames".into()));
    }
    if fixed < required_fixed {
        return Err(BaError::NotEnoughConstraints(format!(
            "{fixed} fixed frame(s), gauge needs {required_fixed}"
        )));
    }
    let problem = Problem::build(window, opts)?;
    let unknowns = problem.n_pose_dims + problem.n_depth;
    if problem.residual_count() < unknowns {
        return Err(BaError::NotEnoughConstraints(format!(
            "{} residuals for {} unknowns",
            problem.residual_count(),
            unknowns
        )));
    }

    Ok(problem)
}

/// One damped step at the current state without applying it: per-frame pose
/// increments (zero for fixed frames), per-patch inverse-depth increments, and
/// the focal increment when refined.
pub fn compute_step(
    window: &BaWindow,
    opts: &SolveOptions,
    lambda: f64,
) -> Result<(Vec<Twist6>, Vec<f64>, f64), BaError> {
    let problem = checked_problem(window, opts)?;
    let state = State {
        poses: window.poses.clone(),
        inv_depths: window.patches.iter().map(|p| p.inv_depth).collect(),
        k: window.intrinsics,
    };
    let sys = problem.linearize(&state);
    let (dp, dd) =
        problem.solve_step(&sys, lambda, opts.linear_solver).ok_or(BaError::SingularSystem { lambda })?;
    let poses = problem
        .pose_var
        .iter()
        .map(|v| match v {
            Some(o) => Twist6::from_iterator(dp.rows(*o, 6).iter().copied()),
            None => Twist6::zeros(),
        })
        .collect();
    let df = problem.focal_var.map(|o| dp[o]).unwrap_or(0.0);
    Ok((poses, dd, df))
}

/// Damped Gauss-Newton (Levenberg-Marquardt) over the free poses and inverse depths of a window.
/// Updates `window` in place.
pub fn solve(window: &mut BaWindow, opts: &SolveOptions) -> Result<SolveReport, BaError> {
    let problem = checked_problem(window, opts)?;

    let mut state = State {
        poses: window.poses.clone(),
        inv_depths: window.patches.iter().map(|p| p.inv_depth).collect(),
        k: window.intrinsics,
    };
    let initial_cost = problem.cost(&state);
    let mut cost = initial_cost;
    let mut lambda = opts.initial_lambda;
    let mut iterations = 0;
    let mut converged = cost < ABS_COST_FLOOR * problem.residual_count() as f64;
    let mut cost_history = vec![cost];

    while iterations < opts.max_iterations && !converged {
        iterations += 1;
        let sys = problem.linearize(&state);
        let mut accepted = false;
        loop {
            let step = problem.solve_step(&sys, lambda, opts.linear_solver);
            let Some((dp, dd)) = step else {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    return Err(BaError::SingularSystem { lambda });
                }
                continue;
            };
            let trial = problem.apply(&state, &dp, &dd);
            let trial_cost = problem.cost(&trial);
            if trial_cost.is_finite() && trial_cost < cost {
                let decrease = cost - trial_cost;
                state = trial;
                let step_norm = dp.norm() + dd.iter().map(|d| d * d).sum::<f64>().sqrt();
                if decrease <= opts.relative_tolerance * cost || step_norm < 1e-14 || trial_cost < ABS_COST_FLOOR * problem.residual_count() as f64 {
                    converged = true;
                }
                cost = trial_cost;
                cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                break;
            }
        }
        if !accepted {
            // No descent direction left at any damping: at a minimum.
            converged = true;
        }
    }

    window.poses = state.poses.clone();
    for (p, d) in window.patches.iter_mut().zip(&state.inv_depths) {
        p.inv_depth = *d;
    }
    window.intrinsics = state.k;

    let mut edge_weights = Vec::with_capacity(problem.edges.len());
    let mut inactive_edges = Vec::with_capacity(problem.edges.len());
    for e in &problem.edges {
        match crate::geometry::reproject_patch(
            &state.k,
            &state.poses[e.host],
            &state.poses[e.target],
            &problem.centers[e.patch],
            state.inv_depths[e.patch],
        ) {
            Ok(px) => {
                edge_weights.push(e.confidence * robust_weight((px - e.observed).norm(), problem.huber));
                inactive_edges.push(false);
            }
            Err(_) => {
                edge_weights.push(0.0);
                inactive_edges.push(true);
            }
        }
    }

    Ok(SolveReport { initial_cost, final_cost: cost, iterations, edge_weights, inactive_edges, converged, cost_history })
}
