//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, Vector3};

/// Below this angle the trigonometric coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-3;

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues coefficients `a = sin t / t`, `b = (1 - cos t) / t^2` and their
/// derivatives divided by `t`.
fn coefficients(t: f64) -> (f64, f64, f64, f64) {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = t.sin_cos();
        let t2 = t * t;
        let a = s / t;
        let b = (1.0 - c) / t2;
        let da = (t * c - s) / (t2 * t);
        let db = (t * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = coefficients(v.norm());
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix together with its three partial derivatives.
pub fn exp_with_jacobian(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = coefficients(v.norm());
    let k = skew(v);
    let k2 = k * k;
    let rot = Matrix3::identity() + k * a + k2 * b;
    let mut d = [Matrix3::zeros(); 3];
    for (i, di) in d.iter_mut().enumerate() {
        let ei = skew(&Vector3::ith(i, 1.0));
        *di = ei * a + (ei * k + k * ei) * b + k * (da * v[i]) + k2 * (db * v[i]);
    }
    (rot, d)
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-6 {
        return w * 0.5;
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // Axis from the symmetric part; sign taken from the largest diagonal entry.
        let m = (r + Matrix3::identity()) * 0.5;
        let i = (0..3)
            .max_by(|&a, &b| m[(a, a)].total_cmp(&m[(b, b)]))
            .unwrap_or(0);
        let mut axis = m.column(i).into_owned();
        axis /= axis.norm();
        return axis * angle;
    }
    w * (angle / (2.0 * angle.sin()))
}

/// Wraps the angle into `[0, pi]` while keeping the represented rotation.
pub fn canonicalize(v: &Vector3<f64>) -> Vector3<f64> {
    let t = v.norm();
    if t <= std::f64::consts::PI {
        return *v;
    }
    log(&exp(v))
}

/// Shortest rotation taking direction `from` onto direction `to`.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Vector3<f64> {
    let f = from.normalize();
    let t = to.normalize();
    let axis = f.cross(&t);
    let s = axis.norm();
    let c = f.dot(&t).clamp(-1.0, 1.0);
    if s < 1e-12 {
        if c > 0.0 {
            return Vector3::zeros();
        }
        let helper = if f.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let perp = f.cross(&helper).normalize();
        return perp * std::f64::consts::PI;
    }
    axis / s * s.atan2(c)
}
