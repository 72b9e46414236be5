//! Spatial (6-D) algebra in world coordinates.
//!
//! Motion and force vectors are expressed in the world frame and referred
//! to the world origin, ordered (linear, angular). A body's spatial
//! velocity `(v, ω)` gives the velocity of any point `x` as `v + ω × x`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::linalg::skew3;

#[inline]
pub fn lin(v: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

#[inline]
pub fn ang(v: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(v[3], v[4], v[5])
}

#[inline]
pub fn join(l: &Vector3<f64>, a: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(l.x, l.y, l.z, a.x, a.y, a.z)
}

/// `a ×ₘ b` for motion vectors.
pub fn cross_motion(a: &Vector6<f64>, b: &Vector6<f64>) -> Vector6<f64> {
    let (v, w) = (lin(a), ang(a));
    let (u, e) = (lin(b), ang(b));
    join(&(w.cross(&u) + v.cross(&e)), &w.cross(&e))
}

/// `a ×* f` for a motion vector acting on a force vector.
pub fn cross_force(a: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let (v, w) = (lin(a), ang(a));
    let (fl, n) = (lin(f), ang(f));
    join(&w.cross(&fl), &(w.cross(&n) + v.cross(&fl)))
}

/// Spatial inertia about the world origin of a body with mass `m`, world
/// center of mass `c` and rotational inertia `ic` (about `c`, world axes).
pub fn inertia_at_origin(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew3(c);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * m));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-cx * m));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(cx * m));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&(ic - cx * cx * m));
    out
}

/// Maps a base twist `(ṗ, ω)` (velocity of the base point `p`) to the
/// spatial velocity at the world origin.
pub fn base_motion_map(p: &Vector3<f64>) -> Matrix6<f64> {
    let mut s = Matrix6::identity();
    s.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew3(p));
    s
}

/// Maps a spatial velocity at the origin to the (point velocity, ω) of `x`.
pub fn point_map(x: &Vector3<f64>) -> Matrix6<f64> {
    let mut s = Matrix6::identity();
    s.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew3(x)));
    s
}

/// Rotation matrix of `angle` about the unit `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = skew3(axis);
    let (s, c) = angle.sin_cos();
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Exponential map of a rotation vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-300 {
        return Matrix3::identity();
    }
    axis_angle(&(w / theta), theta)
}

/// Rotation vector of `r` (inverse of [`exp_so3`]).
///
/// Uses `atan2` on the axial part so that small angles keep full relative
/// precision.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let axial = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    let s = axial.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if c > -0.99 {
        if s < 1e-300 {
            return Vector3::zeros();
        }
        // θ/sinθ, with its series near zero
        let k = if theta < 1e-4 {
            1.0 + theta * theta / 6.0
        } else {
            theta / s
        };
        return axial * k;
    }
    // Near π: axis from the symmetric part, sign from the axial part.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let i = (0..3).max_by(|&a, &b2| b[(a, a)].total_cmp(&b[(b2, b2)])).unwrap();
    let mut axis = b.column(i).into_owned();
    axis /= axis.norm();
    if axis.dot(&axial) < 0.0 {
        axis = -axis;
    }
    axis * theta
}
