use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::GroundTruth;
use crate::loop_detection::Descriptor;

// keeps common exact coordinates (the origin, axis-aligned paths) off cell boundaries
const CELL_OFFSET: f64 = 0.3719;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Place identity of a camera: horizontal grid cell plus heading bin (bins centered on multiples of 2π/bins).
pub fn place_id(center: &Vector3<f64>, heading: f64, cell: f64, heading_bins: u32) -> u64 {
    let cx = (center.x / cell + CELL_OFFSET).floor() as i64;
    let cz = (center.z / cell + CELL_OFFSET).floor() as i64;
    let width = 2.0 * PI / heading_bins as f64;
    let hb = ((heading.rem_euclid(2.0 * PI) / width + 0.5).floor() as u64) % heading_bins as u64;
    let mut h = splitmix(cx as u64);
    h = splitmix(h ^ cz as u64);
    splitmix(h ^ hb)
}

/// Unit vector shared by every frame seeing `place`.
pub fn base_vector(place: u64, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(place)));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Per-frame descriptor: place base vector plus `N(0, σ²/D)` per component, renormalized.
pub fn render_descriptors(gt: &GroundTruth, sigma: f64, dim: usize, seed: u64, rng: &mut ChaCha8Rng) -> Vec<Descriptor> {
    let scale = sigma / (dim as f64).sqrt();
    gt.place_ids
        .iter()
        .enumerate()
        .map(|(f, &place)| {
            let mut v = base_vector(place, dim, seed);
            if sigma > 0.0 {
                for x in &mut v {
                    *x += scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Descriptor { frame_id: f as u32, vector: v.iter().map(|x| (x / n) as f32).collect() }
        })
        .collect()
}
