use super::{Bob, Layout, NoiseSpec, Segment, SimError, WorldSpec};
use crate::geometry::CameraIntrinsics;

pub const STANDARD_WORLD_NAMES: [&str; 4] = ["corridor_forward", "plaza_rotation", "city_loop", "crowded"];

fn base(name: &str, seed: u64) -> WorldSpec {
    WorldSpec {
        name: name.to_string(),
        seed,
        landmark_count: 5000,
        scene_extent: 100.0,
        layout: Layout::Street { half_width: 6.0, facade_height: 12.0, ground_fraction: 0.2 },
        trajectory_script: Vec::new(),
        start_heading_deg: 0.0,
        camera_height: 1.6,
        fps: 5.0,
        bob: Bob { pitch_deg: 2.0, roll_deg: 1.5, wavelength: 4.0 },
        dynamic_object_count: 0,
        dynamic_fraction_of_view: 0.0,
        dynamic_speed: 0.0,
        noise: NoiseSpec {
            pixel_sigma: 0.5,
            prior_depth_lognormal_sigma: 0.1,
            prior_scale_walk_sigma: 0.01,
            descriptor_sigma: 0.05,
        },
        camera: CameraIntrinsics::centered(410.0, 512, 288).expect("valid preset camera"),
        candidates_per_frame: 80,
        edge_radius: 12,
        descriptor_dim: 128,
        place_cell: 2.0,
        heading_bins: 8,
        revisit_radius: 3.0,
        max_depth: 60.0,
    }
}

fn fwd(frames: u32, step: f64) -> Segment {
    Segment::Forward { frames, step }
}

fn arc(frames: u32, step: f64, yaw_deg: f64) -> Segment {
    Segment::Arc { frames, step, yaw_deg }
}

pub fn standard_world(name: &str, seed: u64) -> Result<WorldSpec, SimError> {
    let mut w = base(name, seed);
    match name {
        "corridor_forward" => {
            w.scene_extent = 160.0;
            w.trajectory_script =
                vec![fwd(60, 0.8), arc(20, 0.8, 1.5), fwd(40, 0.8), arc(20, 0.8, -1.5), fwd(60, 0.8)];
        }
        "plaza_rotation" => {
            w.landmark_count = 4000;
            w.scene_extent = 50.0;
            w.layout =
                Layout::Plaza { center_x: 0.0, center_z: 12.0, radius: 25.0, facade_height: 12.0, ground_fraction: 0.2 };
            w.trajectory_script =
                vec![fwd(24, 0.5), Segment::PureRotation { frames: 40, yaw_deg: 3.0 }, fwd(24, 0.5)];
        }
        "city_loop" => {
            w.landmark_count = 12000;
            let mut script = Vec::new();
            for _ in 0..4 {
                script.push(arc(30, 0.8, 3.0));
                script.push(fwd(85, 0.8));
            }
            script.push(arc(30, 0.8, 3.0));
            script.push(fwd(10, 0.8));
            w.trajectory_script = script;
        }
        "crowded" => {
            w.landmark_count = 4000;
            w.dynamic_object_count = 40;
            w.dynamic_fraction_of_view = 0.2;
            w.dynamic_speed = 5.0;
            w.trajectory_script = vec![fwd(50, 0.8), arc(20, 0.8, 1.5), fwd(50, 0.8)];
        }
        other => return Err(SimError::UnknownPreset(other.to_string())),
    }
    Ok(w)
}

pub fn standard_worlds(seed: u64) -> Vec<WorldSpec> {
    STANDARD_WORLD_NAMES.iter().map(|n| standard_world(n, seed).expect("known preset")).collect()
}
