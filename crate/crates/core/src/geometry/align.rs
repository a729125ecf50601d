//! Closed-form similarity alignment of point sets (Umeyama).

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::sim3::SimPose;
use super::GeometryError;

#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    /// Maps source points onto target points.
    pub transform: SimPose,
    pub rmse: f64,
}

/// Find `T` minimizing `Σ ‖dst_k − T(src_k)‖²`. With `with_scale = false` the scale is pinned to 1.
pub fn align_points(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, GeometryError> {
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::DegenerateCollinear);
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut cov_src = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        let b = d - mu_d;
        cov += b * a.transpose();
        cov_src += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let ev = cov_src.symmetric_eigenvalues();
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(GeometryError::DegenerateCollinear);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        let trace = (Matrix3::from_diagonal(&svd.singular_values) * d).trace();
        trace / var_s
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = mu_d - rotation * mu_s * scale;
    let transform = SimPose::new(scale, rotation, translation);
    let sse: f64 = src.iter().zip(dst).map(|(s, d)| (d - transform.transform_point(s)).norm_squared()).sum();
    Ok(Alignment { transform, rmse: (sse / nf).sqrt() })
}
