//! Rotation helpers on unit quaternions.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let half = 0.5 * theta;
    let (w, k) = if theta < 1e-4 {
        // sin(t/2)/t series
        let k = 0.5 - theta_sq / 48.0 + theta_sq * theta_sq / 3840.0;
        (1.0 - theta_sq / 8.0 + theta_sq * theta_sq / 384.0, k)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

/// Logarithm of a unit quaternion, returning a rotation vector with angle in `[0, π]`.
///
/// At exactly π the axis sign is ambiguous; the branch whose largest-magnitude
/// axis component is positive is returned.
pub fn log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < 1e-12 {
        let w_sq = w * w;
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w_sq));
    }
    let theta = 2.0 * n.atan2(w);
    let mut omega = v * (theta / n);
    if w.abs() < 1e-15 {
        let imax = omega.iamax();
        if omega[imax] < 0.0 {
            omega = -omega;
        }
    }
    omega
}

/// Coefficients `(a, b, c)` of `W = a I + b [w]x + c [w]x^2`, where
/// `W = ∫₀¹ e^{στ} exp(τ [w]x) dτ` maps tangent translation to group translation.
/// With `sigma = 0` this is the SE(3) left Jacobian of SO(3).
pub(crate) fn translation_coefficients(theta: f64, sigma: f64) -> (f64, f64, f64) {
    let a = moment(0, sigma);
    if theta >= 1e-4 {
        let es = sigma.exp();
        let (s, c) = theta.sin_cos();
        let denom = sigma * sigma + theta * theta;
        let int_cos = (es * (sigma * c + theta * s) - sigma) / denom;
        let int_sin = (es * (sigma * s - theta * c) + theta) / denom;
        (a, int_sin / theta, (a - int_cos) / (theta * theta))
    } else {
        let t2 = theta * theta;
        let b = moment(1, sigma) - t2 / 6.0 * moment(3, sigma);
        let c = 0.5 * moment(2, sigma) - t2 / 24.0 * moment(4, sigma);
        (a, b, c)
    }
}

/// `∫₀¹ τ^k e^{στ} dτ`.
fn moment(k: u32, sigma: f64) -> f64 {
    if sigma.abs() <= 1.0 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for n in 0..30u32 {
            if n > 0 {
                term *= sigma / n as f64;
            }
            sum += term / (n + k + 1) as f64;
        }
        sum
    } else {
        let es = sigma.exp();
        let mut m = sigma.exp_m1() / sigma;
        for j in 1..=k {
            m = (es - j as f64 * m) / sigma;
        }
        m
    }
}

/// `W(ω, σ)` as a matrix.
pub(crate) fn translation_jacobian(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, c) = translation_coefficients(theta, sigma);
    let w = hat(omega);
    Matrix3::identity() * a + w * b + w * w * c
}
