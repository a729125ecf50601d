//! Pinhole camera model and the patch reprojection function.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::se3::Pose;
use super::so3::hat;
use super::GeometryError;

/// Points closer than this to the camera plane are rejected.
pub const MIN_DEPTH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Same principal point and image size, new focal length (`fx = fy = f`).
    pub fn with_focal(&self, f: f64) -> Self {
        Self { fx: f, fy: f, ..*self }
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Normalized image ray `[(u-cx)/fx, (v-cy)/fy, 1]`.
    pub fn ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if p_cam.z <= MIN_DEPTH {
        return Err(GeometryError::DepthNonPositive);
    }
    Ok(Vector2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy))
}

pub fn backproject(
    k: &CameraIntrinsics,
    px: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(inv_depth > 0.0) {
        return Err(GeometryError::DepthNonPositive);
    }
    Ok(k.ray(px) / inv_depth)
}

/// Predicted location in frame `j` of a patch centered at `center` in frame `i`.
pub fn reproject_patch(
    k: &CameraIntrinsics,
    g_i: &Pose,
    g_j: &Pose,
    center: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Vector2<f64>, GeometryError> {
    if !(inv_depth > 0.0) {
        return Err(GeometryError::DepthNonPositive);
    }
    let g_ji = Pose::relative(g_i, g_j);
    let p = g_ji.rotation * k.ray(center) + g_ji.translation * inv_depth;
    if p.z <= MIN_DEPTH * inv_depth {
        return Err(GeometryError::BehindCamera);
    }
    Ok(pixel_of(k, &p))
}

fn pixel_of(k: &CameraIntrinsics, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Reprojection with Jacobians w.r.t. left perturbations of both poses and the inverse depth.
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    pub pixel: Vector2<f64>,
    pub d_pose_i: Matrix2x6<f64>,
    pub d_pose_j: Matrix2x6<f64>,
    pub d_inv_depth: Vector2<f64>,
    /// Derivative w.r.t. a shared focal length `f = fx = fy` (principal point fixed).
    pub d_focal: Vector2<f64>,
}

pub fn reproject_with_jacobians(
    k: &CameraIntrinsics,
    g_i: &Pose,
    g_j: &Pose,
    center: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Reprojection, GeometryError> {
    if !(inv_depth > 0.0) {
        return Err(GeometryError::DepthNonPositive);
    }
    let g_ji = Pose::relative(g_i, g_j);
    let r_ji = g_ji.rotation_matrix();
    let ray = k.ray(center);
    let p = r_ji * ray + g_ji.translation * inv_depth;
    if p.z <= MIN_DEPTH * inv_depth {
        return Err(GeometryError::BehindCamera);
    }
    let iz = 1.0 / p.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    );

    let mut dp_j = Matrix3x6::zeros();
    dp_j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    dp_j.fixed_view_mut::<3, 3>(0, 0).scale_mut(inv_depth);
    dp_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&p)));

    let mut dp_i = Matrix3x6::zeros();
    dp_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_ji * inv_depth));
    dp_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r_ji * hat(&ray)));

    let d_ray_df = Vector3::new(-(center.x - k.cx) / (k.fx * k.fx), -(center.y - k.cy) / (k.fy * k.fy), 0.0);
    let d_focal = Vector2::new(p.x * iz, p.y * iz) + d_proj * (r_ji * d_ray_df);

    Ok(Reprojection {
        pixel: pixel_of(k, &p),
        d_pose_i: d_proj * dp_i,
        d_pose_j: d_proj * dp_j,
        d_inv_depth: d_proj * g_ji.translation,
        d_focal,
    })
}
