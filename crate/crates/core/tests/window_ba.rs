mod common;

use common::*;
use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidslam::ba::{
    align_prior_scale, compute_step, residual_reprojection, solve, window_cost, AlphaDenominator, BaError, BaWindow,
    CorrespondenceEdge, LinearSolver, Patch, SolveOptions,
};
use vidslam::geometry::{Pose, Twist6};

fn perturb(window: &mut BaWindow, rng: &mut ChaCha8Rng, rot: f64, trans: f64, depth: f64) {
    for (f, g) in window.frames.clone().iter().zip(window.poses.iter_mut()) {
        if window.fixed_frames.contains(f) {
            continue;
        }
        let mut xi = Twist6::zeros();
        for c in 0..3 {
            xi[c] = rng.random_range(-trans..trans);
            xi[c + 3] = rng.random_range(-rot..rot);
        }
        *g = g.retract(&xi);
    }
    for p in window.patches.iter_mut() {
        p.inv_depth *= 1.0 + rng.random_range(-depth..depth);
    }
}

#[test]
fn zero_noise_window_recovers_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut scene = random_scene(&mut rng, 5, 12, 0.0);
    scene.window.fixed_frames = [0, 1].into_iter().collect();
    perturb(&mut scene.window, &mut rng, 0.02, 0.05, 0.1);
    let opts = SolveOptions { max_iterations: 60, ..Default::default() };
    let report = solve(&mut scene.window, &opts).unwrap();
    assert!(report.final_cost < 1e-10, "cost {}", report.final_cost);
    assert!(max_pose_error(&scene.window.poses, &scene.gt_poses) < 1e-6);
    for (p, d) in scene.window.patches.iter().zip(&scene.gt_inv_depths) {
        assert!((p.inv_depth - d).abs() < 1e-6 * d);
    }
}

#[test]
fn exact_priors_pull_back_from_perturbed_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scene = random_scene(&mut rng, 5, 10, 0.0);
    scene.window.priors = exact_priors(&scene);
    scene.window.mu = 0.05;
    scene.window.fixed_frames = [0].into_iter().collect();
    perturb(&mut scene.window, &mut rng, 5f64.to_radians(), 0.05 * 1.6, 0.1);
    let opts = SolveOptions { max_iterations: 100, ..Default::default() };
    let report = solve(&mut scene.window, &opts).unwrap();
    assert!(report.final_cost < 1e-12, "cost {}", report.final_cost);
    assert!(max_pose_error(&scene.window.poses, &scene.gt_poses) < 1e-6);
}

#[test]
fn single_free_pose_single_patch_without_prior() {
    let k = camera();
    let mut w = BaWindow::new(k);
    w.frames = vec![0, 1];
    w.poses = vec![Pose::identity(), Pose::from_translation(nalgebra::Vector3::new(-0.5, 0.0, 0.0))];
    w.fixed_frames = [0].into_iter().collect();
    w.patches.push(Patch { frame_id: 0, patch_id: 0, center: Vector2::new(200.0, 100.0), inv_depth: 0.2, footprint: 3 });
    w.edges.push(CorrespondenceEdge {
        src_frame: 0,
        patch_id: 0,
        dst_frame: 1,
        observed: Vector2::new(160.0, 100.0),
        confidence: 1.0,
    });
    assert!(matches!(solve(&mut w, &SolveOptions::default()), Err(BaError::NotEnoughConstraints(_))));
    // Even with the gauge satisfied, one edge cannot pin six pose dofs and a depth.
    w.fixed_frames.clear();
    w.frames.push(2);
    w.poses.push(Pose::identity());
    w.fixed_frames = [0, 2].into_iter().collect();
    assert!(matches!(solve(&mut w, &SolveOptions::default()), Err(BaError::NotEnoughConstraints(_))));
}

#[test]
fn schur_dense_and_oracle_steps_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let n_frames = 3 + trial % 3;
        let per = 20 / n_frames;
        let mut scene = random_scene(&mut rng, n_frames, per, 0.7);
        if trial % 2 == 0 {
            scene.window.fixed_frames = [0, 1].into_iter().collect();
        } else {
            scene.window.priors = exact_priors(&scene);
            scene.window.mu = 0.05;
            scene.window.fixed_frames = [0].into_iter().collect();
        }
        perturb(&mut scene.window, &mut rng, 0.01, 0.03, 0.05);
        let lambda = 1e-4;
        let schur = compute_step(&scene.window, &SolveOptions::default(), lambda).unwrap();
        let dense = compute_step(
            &scene.window,
            &SolveOptions { linear_solver: LinearSolver::Dense, ..Default::default() },
            lambda,
        )
        .unwrap();
        let (o_poses, o_depths) = dense_oracle_step(&scene.window, lambda);
        for f in 0..n_frames {
            for c in 0..6 {
                assert!((schur.0[f][c] - dense.0[f][c]).abs() < 1e-8);
                assert!((schur.0[f][c] - o_poses[f][c]).abs() < 1e-8, "trial {trial}");
            }
        }
        for (k, d) in o_depths.iter().enumerate() {
            assert!((schur.1[k] - dense.1[k]).abs() < 1e-8);
            assert!((schur.1[k] - d).abs() < 1e-8);
        }
    }
}

#[test]
fn accepted_steps_never_raise_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut scene = random_scene(&mut rng, 5, 8, 1.0);
        // a few gross outliers so the robust kernel is active
        for e in scene.window.edges.iter_mut().step_by(9) {
            e.observed.x += 25.0;
        }
        scene.window.fixed_frames = [0, 1].into_iter().collect();
        perturb(&mut scene.window, &mut rng, 0.03, 0.1, 0.2);
        let report = solve(&mut scene.window, &SolveOptions { max_iterations: 30, ..Default::default() }).unwrap();
        for pair in report.cost_history.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!((window_cost(&scene.window).unwrap() - report.final_cost).abs() < 1e-9 * report.final_cost.max(1.0));
        assert!(report.edge_weights.iter().any(|&w| w < 1.0));
    }
}

#[test]
fn scaling_map_and_priors_scales_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut scene = random_scene(&mut rng, 4, 6, 0.8);
    scene.window.priors = exact_priors(&scene);
    for p in scene.window.priors.iter_mut() {
        p.prior_depth *= 1.0 + rng.random_range(-0.1..0.1);
    }
    scene.window.mu = 0.05;
    scene.window.fixed_frames = [0].into_iter().collect();
    perturb(&mut scene.window, &mut rng, 0.01, 0.03, 0.05);
    let c = 3.0;
    let mut scaled = scene.window.clone();
    for g in scaled.poses.iter_mut() {
        g.translation *= c;
    }
    for p in scaled.patches.iter_mut() {
        p.inv_depth /= c;
    }
    for p in scaled.priors.iter_mut() {
        p.prior_depth *= c;
    }
    // The prior residual lives in inverse depth, so its weight scales with c² to keep the objective equivariant.
    scaled.mu *= c * c;
    let opts = SolveOptions { max_iterations: 40, ..Default::default() };
    let mut base = scene.window.clone();
    solve(&mut base, &opts).unwrap();
    solve(&mut scaled, &opts).unwrap();
    for (a, b) in base.poses.iter().zip(&scaled.poses) {
        assert!(a.rotation.angle_to(&b.rotation) < 1e-8);
        assert!((a.translation * c - b.translation).norm() < 1e-8 * c);
    }
    for (a, b) in base.patches.iter().zip(&scaled.patches) {
        assert!((a.inv_depth - b.inv_depth * c).abs() < 1e-8 * a.inv_depth);
    }
}

#[test]
fn pure_rotation_depths_follow_priors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut scene = random_scene(&mut rng, 5, 10, 0.0);
    // collapse every camera center onto the first one
    let c0 = scene.gt_poses[0].center();
    for g in scene.window.poses.iter_mut().chain(scene.gt_poses.iter_mut()) {
        g.translation = -(g.rotation * c0);
    }
    let k = scene.window.intrinsics;
    for e in scene.window.edges.iter_mut() {
        let p = scene.window.patches.iter().find(|p| p.frame_id == e.src_frame && p.patch_id == e.patch_id).unwrap();
        let (gi, gj) = (&scene.gt_poses[e.src_frame as usize], &scene.gt_poses[e.dst_frame as usize]);
        e.observed = vidslam::geometry::reproject_patch(&k, gi, gj, &p.center, p.inv_depth).unwrap();
    }
    scene.window.priors = exact_priors(&scene);
    scene.window.mu = 0.05;
    scene.window.fixed_frames = [0].into_iter().collect();
    perturb(&mut scene.window, &mut rng, 0.01, 1e-3, 0.3);
    solve(&mut scene.window, &SolveOptions { max_iterations: 50, ..Default::default() }).unwrap();
    for (p, d) in scene.window.patches.iter().zip(&scene.gt_inv_depths) {
        assert!((p.inv_depth - d).abs() < 0.01 * d, "{} vs {}", p.inv_depth, d);
    }
}

#[test]
fn residual_sum_matches_independent_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut scene = random_scene(&mut rng, 4, 5, 0.0);
    perturb(&mut scene.window, &mut rng, 0.02, 0.05, 0.1);
    scene.window.huber_delta = 1e9;
    let mut brute = 0.0;
    let k = scene.window.intrinsics;
    for e in &scene.window.edges {
        let p = scene.window.patches.iter().find(|p| p.frame_id == e.src_frame && p.patch_id == e.patch_id).unwrap();
        let gi = scene.window.poses[e.src_frame as usize].to_matrix();
        let gj = scene.window.poses[e.dst_frame as usize].to_matrix();
        let x_cam = nalgebra::Vector4::new((p.center.x - k.cx) / k.fx / p.inv_depth, (p.center.y - k.cy) / k.fy / p.inv_depth, 1.0 / p.inv_depth, 1.0);
        let q = gj * gi.try_inverse().unwrap() * x_cam;
        let u = k.fx * q.x / q.z + k.cx - e.observed.x;
        let v = k.fy * q.y / q.z + k.cy - e.observed.y;
        brute += u * u + v * v;
        let r = residual_reprojection(e, &scene.window).unwrap();
        assert!(r.active);
        assert!((r.residual - Vector2::new(u, v)).norm() < 1e-9);
    }
    assert!((window_cost(&scene.window).unwrap() - brute).abs() < 1e-9 * brute);

    // one-pixel shift of an exact observation
    let e = scene.window.edges[0];
    let exact = residual_reprojection(&e, &scene.window).unwrap().residual + e.observed;
    let shifted = CorrespondenceEdge { observed: exact - Vector2::new(1.0, 0.0), ..e };
    let r = residual_reprojection(&shifted, &scene.window).unwrap().residual;
    assert!((r - Vector2::new(1.0, 0.0)).norm() < 1e-9);
}

#[test]
fn edge_behind_target_is_inactive() {
    let k = camera();
    let mut w = BaWindow::new(k);
    w.frames = vec![0, 1];
    let flip = nalgebra::UnitQuaternion::from_euler_angles(0.0, std::f64::consts::PI, 0.0);
    w.poses = vec![Pose::identity(), Pose::new(flip, nalgebra::Vector3::zeros())];
    w.patches.push(Patch { frame_id: 0, patch_id: 0, center: Vector2::new(256.0, 144.0), inv_depth: 0.5, footprint: 3 });
    let e = CorrespondenceEdge { src_frame: 0, patch_id: 0, dst_frame: 1, observed: Vector2::new(1.0, 2.0), confidence: 1.0 };
    let r = residual_reprojection(&e, &w).unwrap();
    assert!(!r.active);
    assert_eq!(r.residual, Vector2::zeros());
}

proptest! {
    #[test]
    fn alpha_scales_with_priors(
        priors in proptest::collection::vec(0.5f64..50.0, 1..30),
        depths in proptest::collection::vec(0.02f64..2.0, 1..30),
        c in 0.01f64..100.0,
    ) {
        let a = align_prior_scale(&priors, &depths, AlphaDenominator::Depth).unwrap();
        let scaled: Vec<f64> = priors.iter().map(|p| p * c).collect();
        let b = align_prior_scale(&scaled, &depths, AlphaDenominator::Depth).unwrap();
        prop_assert!((b - a * c).abs() <= 1e-12 * b.abs());
    }
}
