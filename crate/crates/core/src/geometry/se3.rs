//! Rigid transforms (SE(3)) stored as unit quaternion + translation.
//!
//! Poses follow the world-to-camera convention: `pose.transform_point(x_world)`
//! yields camera coordinates. Tangent vectors are ordered `[ρ, ω]`
//! (translation first, then rotation).

use nalgebra::{Matrix3, Matrix4, Matrix6, UnitQuaternion, Vector3, Vector6};

use super::so3;

/// se(3) tangent coordinates `[ρx, ρy, ρz, ωx, ωy, ωz]`.
pub type Twist6 = Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: t }
    }

    pub fn exp(xi: &Twist6) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let omega = xi.fixed_rows::<3>(3).into_owned();
        let v = so3::translation_jacobian(&omega, 0.0);
        Self { rotation: so3::exp(&omega), translation: v * rho }
    }

    pub fn log(&self) -> Twist6 {
        let omega = so3::log(&self.rotation);
        let theta = omega.norm();
        let w = so3::hat(&omega);
        let half = 0.5 * theta;
        let c = if theta < 1e-2 {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            (1.0 - half / half.tan()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        let rho = v_inv * self.translation;
        Twist6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose { rotation: r_inv, translation: -(r_inv * self.translation) }
    }

    /// Transform from camera `i` to camera `j` for world-to-camera poses `G_i`, `G_j`:
    /// `G_j · G_i⁻¹`.
    pub fn relative(g_i: &Pose, g_j: &Pose) -> Pose {
        g_j.compose(&g_i.inverse())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates, for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplicative retraction `exp(ξ)·self`, renormalized.
    pub fn retract(&self, xi: &Twist6) -> Pose {
        let mut p = Pose::exp(xi).compose(self);
        p.rotation.renormalize();
        p
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint acting on `[ρ, ω]` tangents.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut a = Matrix6::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(so3::hat(&self.translation) * r));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        a
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }

    /// Linear interpolation of translation and slerp of rotation, `t ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        Pose {
            rotation: self.rotation.slerp(&other.rotation, t),
            translation: self.translation.lerp(&other.translation, t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// exp of the 4x4 twist matrix by truncated power series.
    fn series_exp(xi: &Twist6) -> Matrix4<f64> {
        let mut x = Matrix4::zeros();
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3::hat(&omega));
        x[(0, 3)] = xi[0];
        x[(1, 3)] = xi[1];
        x[(2, 3)] = xi[2];
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for n in 1..30 {
            term = term * x / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn zero_and_pure_translation() {
        assert_eq!(Pose::exp(&Twist6::zeros()), Pose::identity());
        let p = Pose::exp(&Twist6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((p.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(p.rotation.angle() < 1e-15);
    }

    #[test]
    fn quarter_turn_matches_series() {
        let xi = Twist6::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        let m = Pose::exp(&xi).to_matrix();
        assert!((m - series_exp(&xi)).abs().max() < 1e-12);
        let mixed = Twist6::new(0.3, -1.2, 0.7, 0.4, -0.9, 1.1);
        assert!((Pose::exp(&mixed).to_matrix() - series_exp(&mixed)).abs().max() < 1e-12);
    }

    #[test]
    fn relative_identities() {
        let g = Pose::exp(&Twist6::new(0.3, -1.2, 0.7, 0.4, -0.9, 1.1));
        let r = Pose::relative(&g, &g);
        assert!(r.log().norm() < 1e-12);
        let r = Pose::relative(&Pose::identity(), &g);
        assert!((r.to_matrix() - g.to_matrix()).abs().max() < 1e-15);
    }
}
