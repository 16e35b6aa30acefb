//! Rotation helpers: ZYX (yaw-pitch-roll) Euler angles, exponential-map
//! orientation updates and angle wrapping.
//!
//! World frame is z-up. Body frame is x forward, y left, z up. With the ZYX
//! convention a positive pitch rotates the nose *down*.

use std::f64::consts::{PI, TAU};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

pub type Quat = UnitQuaternion<f64>;
pub type Vec3 = Vector3<f64>;

/// Roll, pitch and yaw in radians, applied as `Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    /// Builds the angles, wrapping each into (-pi, pi].
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn from_quat(q: &Quat) -> Self {
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
        let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
        Self::new(roll, pitch, yaw)
    }

    pub fn to_quat(&self) -> Quat {
        quat_from_euler(self)
    }
}

pub fn quat_from_euler(e: &EulerAngles) -> Quat {
    let (sr, cr) = (0.5 * e.roll).sin_cos();
    let (sp, cp) = (0.5 * e.pitch).sin_cos();
    let (sy, cy) = (0.5 * e.yaw).sin_cos();
    let q = Quaternion::new(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    );
    UnitQuaternion::new_normalize(q)
}

/// Advances `q` (world <- body) by body rates `omega` held constant over `dt`.
pub fn integrate_orientation(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    if omega.iter().all(|w| *w == 0.0) {
        return *q;
    }
    let delta = UnitQuaternion::from_scaled_axis(omega * dt);
    UnitQuaternion::new_normalize(q.into_inner() * delta.into_inner())
}

/// Constant body rates that carry `from` onto `to` in `dt`; inverse of
/// [`integrate_orientation`].
pub fn body_rates_between(from: &Quat, to: &Quat, dt: f64) -> Vec3 {
    let rel = from.inverse() * to;
    rel.scaled_axis() / dt
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Body-frame specific force as an IMU would report it:
/// finite-differenced body velocity, plus the transport term `omega x v`,
/// plus the reaction to gravity rotated into the body frame.
pub fn specific_force(
    v_prev: &Vec3,
    v_next: &Vec3,
    omega: &Vec3,
    orientation: &Quat,
    gravity: f64,
    dt: f64,
) -> Vec3 {
    (v_next - v_prev) / dt
        + omega.cross(v_next)
        + orientation.inverse_transform_vector(&Vec3::new(0.0, 0.0, gravity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn rx(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }
    fn ry(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }
    fn rz(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_euler_gives_identity() {
        let q = quat_from_euler(&EulerAngles::new(0.0, 0.0, 0.0));
        assert!(q.angle_to(&Quat::identity()) < 1e-15);
    }

    #[test]
    fn half_turn_yaw_flips_forward_axis() {
        let q = quat_from_euler(&EulerAngles::new(0.0, 0.0, PI));
        let v = q.transform_vector(&Vec3::x());
        assert!((v - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn euler_matches_matrix_composition() {
        let e = EulerAngles::new(0.1, 0.2, 0.3);
        let q = quat_from_euler(&e);
        let m = rz(0.3) * ry(0.2) * rx(0.1);
        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
            assert!((q.transform_vector(&axis) - m * axis).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_keeps_orientation() {
        let q = quat_from_euler(&EulerAngles::new(0.3, -0.1, 2.0));
        assert_eq!(integrate_orientation(&q, &Vec3::zeros(), 0.1), q);
        assert_eq!(
            integrate_orientation(&Quat::identity(), &Vec3::zeros(), 0.1),
            Quat::identity()
        );
    }

    #[test]
    fn planar_yaw_integration() {
        let q = integrate_orientation(&Quat::identity(), &Vec3::new(0.0, 0.0, 2.0), 0.1);
        let e = EulerAngles::from_quat(&q);
        assert!((e.yaw - 0.2).abs() < 1e-12);
        assert!(e.roll.abs() < 1e-12 && e.pitch.abs() < 1e-12);
    }

    #[test]
    fn exponential_update_matches_fine_substeps() {
        let omega = Vec3::new(0.3, 0.2, 0.1);
        let q = integrate_orientation(&Quat::identity(), &omega, 0.1);
        // first-order Euler on the quaternion ODE q' = 0.5 q (0, w)
        let n = 1000;
        let h = 0.1 / n as f64;
        let mut r = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        let w = Quaternion::new(0.0, omega.x, omega.y, omega.z);
        for _ in 0..n {
            r = r + (r * w) * (0.5 * h);
            r = r.normalize();
        }
        let oracle = UnitQuaternion::new_normalize(r);
        assert!(q.angle_to(&oracle) < 1e-6);
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.5 * PI) - 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn specific_force_at_rest_is_gravity_reaction() {
        let a = specific_force(
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Quat::identity(),
            9.81,
            0.1,
        );
        assert_eq!(a, Vec3::new(0.0, 0.0, 9.81));
    }

    proptest! {
        #[test]
        fn rotation_equals_zyx_product(
            roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0, vz in -5.0f64..5.0,
        ) {
            let q = quat_from_euler(&EulerAngles::new(roll, pitch, yaw));
            let v = Vec3::new(vx, vy, vz);
            let m = rz(yaw) * ry(pitch) * rx(roll);
            prop_assert!((q.transform_vector(&v) - m * v).norm() < 1e-9);
        }

        #[test]
        fn euler_round_trip_away_from_gimbal_lock(
            roll in -3.1f64..3.1, pitch in -1.56f64..1.56, yaw in -3.1f64..3.1,
        ) {
            let q = quat_from_euler(&EulerAngles::new(roll, pitch, yaw));
            let back = quat_from_euler(&EulerAngles::from_quat(&q));
            prop_assert!(q.angle_to(&back) < 1e-9);
        }

        #[test]
        fn wrap_is_idempotent_and_congruent(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
            let k = ((a - w) / TAU).round();
            prop_assert!((a - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn single_axis_steps_compose(rate in -3.0f64..3.0, axis in 0usize..3, n in 1usize..50) {
            let mut omega = Vec3::zeros();
            omega[axis] = rate;
            let q0 = quat_from_euler(&EulerAngles::new(0.2, -0.3, 1.0));
            let mut q = q0;
            for _ in 0..n {
                q = integrate_orientation(&q, &omega, 0.1);
            }
            let once = integrate_orientation(&q0, &omega, 0.1 * n as f64);
            prop_assert!(q.angle_to(&once) < 1e-9);
        }

        #[test]
        fn rates_between_inverts_integration(
            wx in -2.0f64..2.0, wy in -2.0f64..2.0, wz in -2.0f64..2.0,
        ) {
            let q0 = quat_from_euler(&EulerAngles::new(0.1, 0.2, -1.0));
            let omega = Vec3::new(wx, wy, wz);
            let q1 = integrate_orientation(&q0, &omega, 0.1);
            prop_assert!((body_rates_between(&q0, &q1, 0.1) - omega).norm() < 1e-9);
        }
    }
}
