//! SIM(3) pose graph over keyframes, closed by loop edges.
//!
//! Edge residual: `r = log(ΔS⁻¹ · S_j · S_i⁻¹)`, weighted by the edge's information matrix.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

use crate::ba::Patch;
use crate::geometry::sim3::{left_jacobian_inverse, Matrix7, SimPose, Twist7};
use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgoError {
    #[error("pose graph normal equations singular up to damping {lambda:e}")]
    SingularSystem { lambda: f64 },
    #[error("node {0} is not connected to a fixed node")]
    DisconnectedGraph(u32),
    #[error("pose graph has no fixed node")]
    NoFixedNode,
    #[error("edge references unknown node {0}")]
    UnknownNode(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Odometry => "odometry",
            EdgeKind::Loop => "loop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Node {
    pub frame_id: u32,
    pub pose: SimPose,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Edge {
    pub src: u32,
    pub dst: u32,
    /// Expected `S_j · S_i⁻¹`.
    pub measurement: SimPose,
    pub kind: EdgeKind,
    pub information: Matrix7,
}

impl Sim3Edge {
    pub fn new(src: u32, dst: u32, measurement: SimPose, kind: EdgeKind) -> Self {
        Self { src, dst, measurement, kind, information: Matrix7::identity() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Sim3Node>,
    pub edges: Vec<Sim3Edge>,
}

/// Nodes at unit scale plus one odometry edge per consecutive keyframe pair.
pub fn lift_trajectory(frame_ids: &[u32], poses: &[Pose]) -> PoseGraph {
    assert_eq!(frame_ids.len(), poses.len());
    let nodes: Vec<Sim3Node> = frame_ids
        .iter()
        .zip(poses)
        .map(|(&frame_id, p)| Sim3Node { frame_id, pose: SimPose::from_pose(p), fixed: false })
        .collect();
    let edges = nodes
        .windows(2)
        .map(|w| Sim3Edge::new(w[0].frame_id, w[1].frame_id, SimPose::relative(&w[0].pose, &w[1].pose), EdgeKind::Odometry))
        .collect();
    PoseGraph { nodes, edges }
}

pub fn loop_residual(edge: &Sim3Edge, s_i: &SimPose, s_j: &SimPose) -> Twist7 {
    edge.measurement.inverse().compose(s_j).compose(&s_i.inverse()).log()
}

/// Jacobians of [`loop_residual`] w.r.t. left perturbations of `S_i` and `S_j`.
pub fn loop_residual_jacobians(edge: &Sim3Edge, s_i: &SimPose, s_j: &SimPose) -> (Twist7, Matrix7, Matrix7) {
    let r = loop_residual(edge, s_i, s_j);
    let jl_inv = left_jacobian_inverse(&r);
    let d_j = jl_inv * edge.measurement.inverse().adjoint();
    let d_i = -jl_inv * SimPose::exp(&r).adjoint();
    (r, d_i, d_j)
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self { max_iterations: 50, step_tolerance: 1e-8, initial_lambda: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub loop_residuals_before: Vec<f64>,
    pub loop_residuals_after: Vec<f64>,
}

impl PoseGraph {
    pub fn node_index(&self, frame_id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.frame_id == frame_id)
    }

    pub fn cost(&self) -> Result<f64, PgoError> {
        let idx = self.index()?;
        Ok(self.cost_with(&idx, &self.nodes.iter().map(|n| n.pose).collect::<Vec<_>>()))
    }

    pub fn loop_residual_norms(&self) -> Vec<f64> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Loop)
            .filter_map(|e| {
                let i = self.node_index(e.src)?;
                let j = self.node_index(e.dst)?;
                Some(loop_residual(e, &self.nodes[i].pose, &self.nodes[j].pose).norm())
            })
            .collect()
    }

    fn index(&self) -> Result<HashMap<u32, usize>, PgoError> {
        let idx: HashMap<u32, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.frame_id, i)).collect();
        for e in &self.edges {
            for id in [e.src, e.dst] {
                if !idx.contains_key(&id) {
                    return Err(PgoError::UnknownNode(id));
                }
            }
        }
        Ok(idx)
    }

    fn cost_with(&self, idx: &HashMap<u32, usize>, poses: &[SimPose]) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = loop_residual(e, &poses[idx[&e.src]], &poses[idx[&e.dst]]);
                (r.transpose() * e.information * r)[0]
            })
            .sum()
    }

    fn check_connected(&self, idx: &HashMap<u32, usize>) -> Result<(), PgoError> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            let (a, b) = (idx[&e.src], idx[&e.dst]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| self.nodes[i].fixed).collect();
        if queue.is_empty() {
            return Err(PgoError::NoFixedNode);
        }
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(PgoError::DisconnectedGraph(self.nodes[i].frame_id)),
            None => Ok(()),
        }
    }

    /// Levenberg-Marquardt over the free nodes' 7-dof tangents with a sparse Cholesky solve.
    pub fn optimize(&mut self, opts: &OptimizeOptions) -> Result<OptimizeReport, PgoError> {
        let idx = self.index()?;
        self.check_connected(&idx)?;
        let mut var = vec![None; self.nodes.len()];
        let mut n_var = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.fixed {
                var[i] = Some(n_var);
                n_var += 1;
            }
        }
        let loop_residuals_before = self.loop_residual_norms();
        let mut poses: Vec<SimPose> = self.nodes.iter().map(|n| n.pose).collect();
        let initial_cost = self.cost_with(&idx, &poses);
        let mut cost = initial_cost;
        let mut lambda = opts.initial_lambda;
        let mut iterations = 0;
        let dim = 7 * n_var;

        while iterations < opts.max_iterations && n_var > 0 && cost > 0.0 {
            // Normal equations as a block-sparse map plus gradient.
            let mut blocks: HashMap<(usize, usize), Matrix7> = HashMap::new();
            let mut g = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let (a, b) = (idx[&e.src], idx[&e.dst]);
                let (r, j_i, j_j) = loop_residual_jacobians(e, &poses[a], &poses[b]);
                let parts = [(var[a], j_i), (var[b], j_j)];
                for (va, ja) in parts.iter() {
                    let Some(va) = va else { continue };
                    let jt_w = ja.transpose() * e.information;
                    let ga = jt_w * r;
                    for c in 0..7 {
                        g[7 * va + c] += ga[c];
                    }
                    for (vb, jb) in parts.iter() {
                        let Some(vb) = vb else { continue };
                        *blocks.entry((*va, *vb)).or_insert_with(Matrix7::zeros) += jt_w * jb;
                    }
                }
            }
            iterations += 1;
            let mut keys: Vec<_> = blocks.keys().copied().collect();
            keys.sort_unstable();
            let mut accepted = false;
            let mut factored = false;
            let mut small_step = false;
            while lambda <= 1e8 {
                let mut coo = CooMatrix::new(dim, dim);
                for &(va, vb) in &keys {
                    let blk = &blocks[&(va, vb)];
                    for r in 0..7 {
                        for c in 0..7 {
                            let mut v = blk[(r, c)];
                            if va == vb && r == c {
                                v = v * (1.0 + lambda) + lambda * 1e-9;
                            }
                            if v != 0.0 || (va == vb && r == c) {
                                coo.push(7 * va + r, 7 * vb + c, v);
                            }
                        }
                    }
                }
                let csc = CscMatrix::from(&coo);
                let step = match CscCholesky::factor(&csc) {
                    Ok(chol) => {
                        let rhs = DMatrix::from_column_slice(dim, 1, (-&g).as_slice());
                        Some(chol.solve(&rhs).column(0).into_owned())
                    }
                    Err(_) => None,
                };
                let Some(dx) = step else {
                    lambda *= 10.0;
                    continue;
                };
                factored = true;
                let trial: Vec<SimPose> = poses
                    .iter()
                    .enumerate()
                    .map(|(i, p)| match var[i] {
                        Some(v) => p.retract(&Twist7::from_iterator(dx.rows(7 * v, 7).iter().copied())),
                        None => *p,
                    })
                    .collect();
                let trial_cost = self.cost_with(&idx, &trial);
                if trial_cost.is_finite() && trial_cost <= cost {
                    poses = trial;
                    cost = trial_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    small_step = dx.norm() < opts.step_tolerance;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                if !factored {
                    return Err(PgoError::SingularSystem { lambda });
                }
                break;
            }
            if small_step {
                break;
            }
        }
        for (n, p) in self.nodes.iter_mut().zip(&poses) {
            n.pose = *p;
        }
        Ok(OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations,
            loop_residuals_before,
            loop_residuals_after: self.loop_residual_norms(),
        })
    }

    /// One line per node `NODE id s qx qy qz qw tx ty tz`, then one per edge
    /// `EDGE i j kind s qx qy qz qw tx ty tz`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let fmt = |s: &SimPose| {
            let q = s.rotation.coords;
            format!(
                "{} {} {} {} {} {} {} {}",
                s.scale, q.x, q.y, q.z, q.w, s.translation.x, s.translation.y, s.translation.z
            )
        };
        for n in &self.nodes {
            let _ = writeln!(out, "NODE {} {}", n.frame_id, fmt(&n.pose));
        }
        for e in &self.edges {
            let _ = writeln!(out, "EDGE {} {} {} {}", e.src, e.dst, e.kind.as_str(), fmt(&e.measurement));
        }
        out
    }
}

/// Parse the text produced by [`PoseGraph::dump`]. Information matrices are not stored and come back as identity.
pub fn parse_dump(text: &str) -> Result<PoseGraph, String> {
    let mut g = PoseGraph::default();
    for (n, line) in text.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        let nums = |from: usize| -> Result<SimPose, String> {
            let v: Vec<f64> = tok[from..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
                .collect::<Result<_, _>>()?;
            if v.len() != 8 {
                return Err(format!("line {}: expected 8 numbers", n + 1));
            }
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[4], v[1], v[2], v[3]));
            Ok(SimPose::new(v[0], q, Vector3::new(v[5], v[6], v[7])))
        };
        let id = |t: &str| t.parse::<u32>().map_err(|e| format!("line {}: {e}", n + 1));
        match tok[0] {
            "NODE" if tok.len() == 10 => g.nodes.push(Sim3Node { frame_id: id(tok[1])?, pose: nums(2)?, fixed: false }),
            "EDGE" if tok.len() == 12 => {
                let kind = match tok[3] {
                    "odometry" => EdgeKind::Odometry,
                    "loop" => EdgeKind::Loop,
                    k => return Err(format!("line {}: unknown edge kind {k}", n + 1)),
                };
                g.edges.push(Sim3Edge::new(id(tok[1])?, id(tok[2])?, nums(4)?, kind));
            }
            _ => return Err(format!("line {}: malformed record", n + 1)),
        }
    }
    Ok(g)
}

/// Pure scale acting on camera coordinates.
fn scaling(c: f64) -> SimPose {
    SimPose::new(c, UnitQuaternion::identity(), Vector3::zeros())
}

/// Fold node scales back into a rigid map.
///
/// A node `S = (s, R, t)` maps world points to `s·R·x + t`; the equivalent rigid camera is `(R, t/s)`,
/// whose camera coordinates are those of `S` divided by `s`. Patches stay attached to their host
/// camera, so their inverse depths are multiplied by the host scale. Every edge measurement is
/// re-expressed between the rescaled nodes (rotation and scale residuals unchanged, translation
/// residual divided by the source scale) and nodes return to unit scale.
///
/// Returns the corrected rigid pose of every node, in node order.
pub fn apply_correction(graph: &mut PoseGraph, patches: &mut [Patch]) -> Vec<Pose> {
    let scales: HashMap<u32, f64> = graph.nodes.iter().map(|n| (n.frame_id, n.pose.scale)).collect();
    for p in patches.iter_mut() {
        if let Some(s) = scales.get(&p.frame_id) {
            p.inv_depth *= s;
        }
    }
    for e in graph.edges.iter_mut() {
        let (si, sj) = (scales[&e.src], scales[&e.dst]);
        e.measurement = scaling(1.0 / sj).compose(&e.measurement).compose(&scaling(si));
    }
    let mut out = Vec::with_capacity(graph.nodes.len());
    for n in graph.nodes.iter_mut() {
        let rigid = scaling(1.0 / n.pose.scale).compose(&n.pose);
        n.pose = SimPose::new(1.0, rigid.rotation, rigid.translation);
        out.push(n.pose.rigid_part());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn twist(v: [f64; 7]) -> Twist7 {
        Twist7::from_column_slice(&v)
    }

    #[test]
    fn lift_of_identical_poses_is_identity_edge() {
        let g = Pose::exp(&crate::geometry::Twist6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3));
        let graph = lift_trajectory(&[0, 1], &[g, g]);
        let m = graph.edges[0].measurement;
        assert!((m.to_matrix() - SimPose::identity().to_matrix()).abs().max() < 1e-12);
        assert!(graph.cost().unwrap() < 1e-24);
    }

    #[test]
    fn scale_offset_shows_in_scale_channel() {
        let s_i = SimPose::exp(&twist([0.3, -0.2, 1.0, 0.1, 0.0, -0.2, 0.0]));
        let s_j = SimPose::exp(&twist([1.3, 0.2, 0.0, 0.0, 0.3, 0.1, 0.0]));
        let edge = Sim3Edge::new(0, 1, SimPose::relative(&s_i, &s_j), EdgeKind::Loop);
        assert!(loop_residual(&edge, &s_i, &s_j).norm() < 1e-12);
        let sigma = 0.3;
        let bumped = SimPose::exp(&twist([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, sigma])).compose(&s_j);
        let r = loop_residual(&edge, &s_i, &bumped);
        // ΔS⁻¹ Z ΔS keeps scale e^σ; its translation vanishes only when ΔS has none.
        assert!((r[6] - sigma).abs() < 1e-12);
        let s_j0 = SimPose::exp(&twist([0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0]));
        let s_i0 = SimPose::exp(&twist([0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0]));
        let e0 = Sim3Edge::new(0, 1, SimPose::relative(&s_i0, &s_j0), EdgeKind::Loop);
        let r0 = loop_residual(&e0, &s_i0, &SimPose::exp(&twist([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, sigma])).compose(&s_j0));
        assert!((r0 - twist([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, sigma])).norm() < 1e-12);
    }

    #[test]
    fn chain_graph_terminates_immediately() {
        let poses: Vec<Pose> =
            (0..6).map(|i| Pose::exp(&crate::geometry::Twist6::new(i as f64, 0.0, 0.1, 0.0, 0.05 * i as f64, 0.0))).collect();
        let mut g = lift_trajectory(&[0, 1, 2, 3, 4, 5], &poses);
        g.nodes[0].fixed = true;
        let before = g.clone();
        let rep = g.optimize(&OptimizeOptions::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert!(rep.final_cost < 1e-24);
        for (a, b) in g.nodes.iter().zip(&before.nodes) {
            assert!((a.pose.to_matrix() - b.pose.to_matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn unreachable_node_is_reported() {
        let poses = vec![Pose::identity(); 3];
        let mut g = lift_trajectory(&[0, 1, 2], &poses);
        g.edges.pop();
        g.nodes[0].fixed = true;
        assert_eq!(g.optimize(&OptimizeOptions::default()).unwrap_err(), PgoError::DisconnectedGraph(2));
        g.nodes[0].fixed = false;
        assert_eq!(g.optimize(&OptimizeOptions::default()).unwrap_err(), PgoError::NoFixedNode);
    }

    #[test]
    fn unit_scales_leave_map_unchanged() {
        let poses: Vec<Pose> = (0..3).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
        let mut g = lift_trajectory(&[0, 1, 2], &poses);
        let mut patches = vec![Patch { frame_id: 1, patch_id: 0, center: Vector2::new(5.0, 5.0), inv_depth: 0.25, footprint: 3 }];
        let out = apply_correction(&mut g, &mut patches);
        assert_eq!(out, poses);
        assert_eq!(patches[0].inv_depth, 0.25);
    }

    #[test]
    fn dump_round_trip() {
        let poses: Vec<Pose> = (0..3).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.5, 0.0))).collect();
        let mut g = lift_trajectory(&[4, 7, 9], &poses);
        g.edges.push(Sim3Edge::new(4, 9, SimPose::exp(&twist([0.1, 0.2, 0.3, 0.0, 0.1, 0.0, 0.2])), EdgeKind::Loop));
        let text = g.dump();
        assert!(text.starts_with("NODE 4 1 0 0 0 1 0 0.5 0\n"));
        assert!(text.contains("EDGE 4 9 loop"));
        let back = parse_dump(&text).unwrap();
        assert_eq!(back.nodes.len(), 3);
        assert_eq!(back.edges.len(), 3);
        assert!((back.edges[2].measurement.to_matrix() - g.edges[2].measurement.to_matrix()).abs().max() < 1e-12);
    }
}
