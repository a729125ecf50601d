//! Similarity transforms (SIM(3)): `x ↦ s·R·x + t`.
//!
//! Tangent vectors are ordered `[ρ(3), ω(3), σ]` with `s = e^σ`.

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, UnitQuaternion, Vector3};

use super::se3::Pose;
use super::so3;

/// sim(3) tangent coordinates `[ρ, ω, σ]`.
pub type Twist7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPose {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimPose {
    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0);
        Self { scale, rotation, translation }
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    /// Lift a rigid pose with unit scale.
    pub fn from_pose(p: &Pose) -> Self {
        Self { scale: 1.0, rotation: p.rotation, translation: p.translation }
    }

    /// Rotation and translation with the scale dropped.
    pub fn rigid_part(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn exp(xi: &Twist7) -> Self {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let sigma = xi[6];
        let w = so3::translation_jacobian(&omega, sigma);
        Self { scale: sigma.exp(), rotation: so3::exp(&omega), translation: w * rho }
    }

    pub fn log(&self) -> Twist7 {
        let omega = so3::log(&self.rotation);
        let sigma = self.scale.ln();
        let w = so3::translation_jacobian(&omega, sigma);
        let rho = w.lu().solve(&self.translation).unwrap_or_else(Vector3::zeros);
        let mut out = Twist7::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&omega);
        out[6] = sigma;
        out
    }

    pub fn compose(&self, other: &SimPose) -> SimPose {
        SimPose {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> SimPose {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        SimPose { scale: s_inv, rotation: r_inv, translation: -(r_inv * self.translation) * s_inv }
    }

    /// `S_j · S_i⁻¹`.
    pub fn relative(s_i: &SimPose, s_j: &SimPose) -> SimPose {
        s_j.compose(&s_i.inverse())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn retract(&self, xi: &Twist7) -> SimPose {
        let mut s = SimPose::exp(xi).compose(self);
        s.rotation.renormalize();
        s
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        let r = self.rotation.to_rotation_matrix().into_inner() * self.scale;
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint: `exp(Ad·ξ) = S·exp(ξ)·S⁻¹`.
    pub fn adjoint(&self) -> Matrix7 {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let mut a = Matrix7::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * self.scale));
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(so3::hat(&self.translation) * r));
        a.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.translation));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        a[(6, 6)] = 1.0;
        a
    }
}

/// Lie-bracket operator `ad_x` so that `ad_x y = [x, y]`.
pub fn ad(x: &Twist7) -> Matrix7 {
    let rho = Vector3::new(x[0], x[1], x[2]);
    let omega = Vector3::new(x[3], x[4], x[5]);
    let sigma = x[6];
    let w = so3::hat(&omega);
    let mut a = Matrix7::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(w + Matrix3::identity() * sigma));
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&so3::hat(&rho));
    a.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-rho));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    a
}

/// Left Jacobian `Σ ad_x^n / (n+1)!`, satisfying
/// `log(exp(δ)·exp(x)) ≈ x + J_l(x)⁻¹ δ`.
pub fn left_jacobian(x: &Twist7) -> Matrix7 {
    let a = ad(x);
    let mut term = Matrix7::identity();
    let mut sum = Matrix7::identity();
    for n in 1..40 {
        term = term * a / (n as f64 + 1.0);
        sum += term;
        if term.abs().max() < 1e-18 * sum.abs().max() {
            break;
        }
    }
    sum
}

pub fn left_jacobian_inverse(x: &Twist7) -> Matrix7 {
    left_jacobian(x).try_inverse().unwrap_or_else(Matrix7::identity)
}
