//! The three single-step dynamics models. Each maps the current state and
//! control to the next body-frame velocity and angular velocity.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::learn::{featurize, MlpWeights};
use crate::rotation::{specific_force, EulerAngles, Vec3};
use crate::terrain::TerrainPatch;
use crate::types::{ControlInput, VehicleParams, VehicleState};

/// Floor on |V_x| in slip-angle denominators, m/s.
pub const MIN_SLIP_SPEED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    NoSlip3D,
    Slip3D,
    Learned,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::NoSlip3D, ModelKind::Slip3D, ModelKind::Learned];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NoSlip3D => "NoSlip3D",
            ModelKind::Slip3D => "Slip3D",
            ModelKind::Learned => "Learned",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noslip3d" | "noslip" => Ok(ModelKind::NoSlip3D),
            "slip3d" | "slip" => Ok(ModelKind::Slip3D),
            "learned" => Ok(ModelKind::Learned),
            _ => Err(Error::ConfigInvalid(format!("unknown model `{s}`"))),
        }
    }
}

/// A model ready to step: the learned variant carries its weights.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    NoSlip3D,
    Slip3D,
    Learned(&'a MlpWeights),
}

impl<'a> Dynamics<'a> {
    pub fn new(kind: ModelKind, weights: Option<&'a MlpWeights>) -> Result<Self> {
        Ok(match kind {
            ModelKind::NoSlip3D => Dynamics::NoSlip3D,
            ModelKind::Slip3D => Dynamics::Slip3D,
            ModelKind::Learned => Dynamics::Learned(
                weights.ok_or_else(|| Error::ShapeMismatch("the learned model needs weights".into()))?,
            ),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Dynamics::NoSlip3D => ModelKind::NoSlip3D,
            Dynamics::Slip3D => ModelKind::Slip3D,
            Dynamics::Learned(_) => ModelKind::Learned,
        }
    }

    /// Whether the rollout pins this model to the ground surface.
    pub fn ground_contact(&self) -> bool {
        !matches!(self, Dynamics::Learned(_))
    }
}

/// Body-frame rates after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyRates {
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    /// Specific force over the step, evaluated with the pre-step orientation.
    pub acceleration: Vec3,
}

impl BodyRates {
    fn from_step(state: &VehicleState, velocity: Vec3, angular_velocity: Vec3, gravity: f64, dt: f64) -> Self {
        let acceleration = specific_force(
            &state.body_velocity,
            &velocity,
            &angular_velocity,
            &state.orientation,
            gravity,
            dt,
        );
        Self {
            velocity,
            angular_velocity,
            acceleration,
        }
    }
}

/// Kinematic bicycle: the body moves at wheel speed with no lateral or
/// vertical slip, and yaws at `V tan(delta) / L`. Roll and pitch rates are
/// left to terrain re-projection.
pub fn noslip_step(state: &VehicleState, u: &ControlInput, params: &VehicleParams, dt: f64) -> BodyRates {
    let u = u.clamped(params.max_steering);
    let vx = u.wheel_speed;
    let yaw_rate = vx * u.steering.tan() / params.wheelbase();
    BodyRates::from_step(
        state,
        Vec3::new(vx, 0.0, 0.0),
        Vec3::new(0.0, 0.0, yaw_rate),
        params.gravity,
        dt,
    )
}

/// Simplified Pacejka curve `mu Fz sin(C atan(B s))` in both directions,
/// with the combined force scaled back onto the friction circle.
///
/// Lateral force opposes the slip angle; longitudinal force follows the
/// slip ratio.
pub fn tire_force(slip_angle: f64, slip_ratio: f64, normal_load: f64, params: &VehicleParams) -> (f64, f64) {
    let fz = normal_load.max(0.0);
    let peak = params.friction * fz;
    let curve = |s: f64| (params.tire_shape * (params.tire_stiffness * s).atan()).sin();
    let mut fx = peak * curve(slip_ratio);
    let mut fy = -peak * curve(slip_angle);
    let mag = fx.hypot(fy);
    if mag > peak && mag > 0.0 {
        let k = peak / mag;
        fx *= k;
        fy *= k;
    }
    (fx, fy)
}

/// Tire-frame forces on each axle, Newtons.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForces {
    pub front_x: f64,
    pub front_y: f64,
    pub rear_x: f64,
    pub rear_y: f64,
}

/// Everything the slip model derives before integrating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlipForces {
    pub tires: TireForces,
    pub front_slip_angle: f64,
    pub rear_slip_angle: f64,
    /// Body-frame force `(F_x, F_y, F_z)`; `F_z` is the normal load.
    pub body: Vec3,
    pub yaw_acceleration: f64,
}

pub fn slip_forces(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    attitude: &EulerAngles,
) -> Result<SlipForces> {
    params.validate()?;
    let front_share = params.front_load_fraction();
    let rear_share = params.rear_load_fraction();
    if front_share < 0.0 || rear_share < 0.0 {
        return Err(Error::NonPhysicalParams("negative static axle load".into()));
    }
    let u = u.clamped(params.max_steering);
    let delta = u.steering;
    let (m, g) = (params.mass, params.gravity);
    let (lf, lr) = (params.front_axle_distance, params.rear_axle_distance);
    let v = state.body_velocity;
    let w = state.body_angular_velocity;

    let denom = v.x.abs().max(MIN_SLIP_SPEED);
    let alpha_f = ((v.y + w.z * lf) / denom).atan() - delta;
    let alpha_r = ((v.y - w.z * lr) / denom).atan();

    let cos_beta = attitude.roll.cos() * attitude.pitch.cos();
    let fz = m * (g * cos_beta - v.x * w.y + v.y * w.x);
    let fz_front = fz.max(0.0) * front_share;
    let fz_rear = fz.max(0.0) * rear_share;

    // Wheel-speed tracking drive force, expressed as the slip ratio that
    // produces it in the linear part of the tire curve.
    let drive = m * params.drive_gain * (u.wheel_speed - v.x);
    let linear_slope = params.friction * params.tire_stiffness * params.tire_shape;
    let slip_ratio = |share: f64, load: f64| {
        if load > 0.0 {
            drive * share / (linear_slope * load)
        } else {
            0.0
        }
    };
    let (fxf, fyf) = tire_force(alpha_f, slip_ratio(front_share, fz_front), fz_front, params);
    let (fxr, fyr) = tire_force(alpha_r, slip_ratio(rear_share, fz_rear), fz_rear, params);

    let (sd, cd) = delta.sin_cos();
    let fx = fxr + fxf * cd - fyf * sd + m * g * attitude.pitch.sin();
    let fy = fyr + fyf * cd + fxf * sd + m * g * attitude.roll.sin();
    let yaw_acceleration = ((fxf * sd + fyf * cd) * lf - fyr * lr) / params.yaw_inertia;

    Ok(SlipForces {
        tires: TireForces {
            front_x: fxf,
            front_y: fyf,
            rear_x: fxr,
            rear_y: fyr,
        },
        front_slip_angle: alpha_f,
        rear_slip_angle: alpha_r,
        body: Vec3::new(fx, fy, fz),
        yaw_acceleration,
    })
}

/// Single-track model with Pacejka tires on a tilted surface. Planar
/// velocity and yaw rate are integrated over `dt`; vertical velocity stays
/// zero and roll/pitch rates pass through (ground contact).
pub fn slip_step(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    attitude: &EulerAngles,
    dt: f64,
) -> Result<BodyRates> {
    let f = slip_forces(state, u, params, attitude)?;
    let v = state.body_velocity;
    let w = state.body_angular_velocity;
    let ax = f.body.x / params.mass + w.z * v.y;
    let ay = f.body.y / params.mass - w.z * v.x;
    let velocity = Vec3::new(v.x + ax * dt, v.y + ay * dt, 0.0);
    let angular_velocity = Vec3::new(w.x, w.y, w.z + f.yaw_acceleration * dt);
    Ok(BodyRates::from_step(state, velocity, angular_velocity, params.gravity, dt))
}

/// Terrain-conditioned network: predicts the change in body velocity and
/// angular velocity from state, attitude, terrain patch and controls.
pub fn learned_step(
    state: &VehicleState,
    u: &ControlInput,
    patch: &TerrainPatch,
    weights: &MlpWeights,
    gravity: f64,
    dt: f64,
) -> Result<BodyRates> {
    let features = featurize(state, u, patch, &weights.input_stats)?;
    let delta = weights.predict_delta(&features)?;
    let velocity = state.body_velocity + Vec3::new(delta[0], delta[1], delta[2]);
    let angular_velocity = state.body_angular_velocity + Vec3::new(delta[3], delta[4], delta[5]);
    Ok(BodyRates::from_step(state, velocity, angular_velocity, gravity, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{quat_from_euler, Quat};
    use proptest::prelude::*;

    fn cruising(vx: f64) -> VehicleState {
        VehicleState {
            time: 0.0,
            position: Vec3::zeros(),
            orientation: Quat::identity(),
            body_velocity: Vec3::new(vx, 0.0, 0.0),
            body_angular_velocity: Vec3::zeros(),
            body_acceleration: Vec3::new(0.0, 0.0, 9.81),
        }
    }

    fn level() -> EulerAngles {
        EulerAngles::default()
    }

    #[test]
    fn noslip_closed_forms() {
        let p = VehicleParams::default();
        let r = noslip_step(&cruising(2.0), &ControlInput::new(0.0, 2.0), &p, 0.1);
        assert_eq!(r.velocity, Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(r.angular_velocity, Vec3::zeros());

        let mut unit = p;
        unit.front_axle_distance = 0.5;
        unit.rear_axle_distance = 0.5;
        unit.max_steering = 1.0;
        let r = noslip_step(&cruising(2.0), &ControlInput::new(std::f64::consts::FRAC_PI_4, 2.0), &unit, 0.1);
        assert!((r.angular_velocity.z - 2.0).abs() < 1e-12);

        let mut long = p;
        long.front_axle_distance = 1.3;
        long.rear_axle_distance = 1.3;
        let r = noslip_step(&cruising(5.0), &ControlInput::new(0.2, 5.0), &long, 0.1);
        assert!((r.angular_velocity.z - 0.3899).abs() < 1e-4);
    }

    #[test]
    fn noslip_clamps_steering() {
        let p = VehicleParams::default();
        let a = noslip_step(&cruising(5.0), &ControlInput::new(5.0, 5.0), &p, 0.1);
        let b = noslip_step(&cruising(5.0), &ControlInput::new(p.max_steering, 5.0), &p, 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn tire_force_basics() {
        let p = VehicleParams::default();
        assert_eq!(tire_force(0.0, 0.0, 5000.0, &p), (0.0, 0.0));
        let (_, fy) = tire_force(10.0, 0.0, 5000.0, &p);
        assert!(fy.abs() <= p.friction * 5000.0);
        assert!(fy < 0.0);
        assert_eq!(tire_force(0.3, 0.2, -10.0, &p), (0.0, 0.0));
    }

    #[test]
    fn tire_linear_slope_matches_finite_difference() {
        let p = VehicleParams::default();
        let fz = 4000.0;
        let h = 1e-7;
        let slope = (tire_force(h, 0.0, fz, &p).1 - tire_force(-h, 0.0, fz, &p).1) / (2.0 * h);
        let expected = -p.friction * fz * p.tire_stiffness * p.tire_shape;
        assert!((slope - expected).abs() / expected.abs() < 1e-6);
    }

    #[test]
    fn slip_equilibrium_on_flat_ground() {
        let p = VehicleParams::default();
        let s = cruising(5.0);
        let f = slip_forces(&s, &ControlInput::new(0.0, 5.0), &p, &level()).unwrap();
        assert_eq!(f.tires, TireForces::default());
        assert!((f.body.z - p.mass * p.gravity).abs() < 1e-9);
        let r = slip_step(&s, &ControlInput::new(0.0, 5.0), &p, &level(), 0.1).unwrap();
        assert_eq!(r.velocity, s.body_velocity);
        assert_eq!(r.angular_velocity, s.body_angular_velocity);
    }

    #[test]
    fn slip_left_steer_yaws_left() {
        let p = VehicleParams::default();
        let f = slip_forces(&cruising(5.0), &ControlInput::new(0.1, 5.0), &p, &level()).unwrap();
        assert!(f.yaw_acceleration > 0.0);
        // hand evaluation: only the front lateral force is non-zero
        let fzf = p.mass * p.gravity * p.rear_axle_distance / p.wheelbase();
        let fyf = p.friction * fzf * (p.tire_shape * (p.tire_stiffness * 0.1).atan()).sin();
        let expected = fyf * 0.1f64.cos() * p.front_axle_distance / p.yaw_inertia;
        assert!((f.yaw_acceleration - expected).abs() < 1e-9);
    }

    #[test]
    fn pitch_adds_gravity_component() {
        let p = VehicleParams::default();
        let attitude = EulerAngles::new(0.0, 0.2, 0.0);
        let mut s = cruising(5.0);
        s.orientation = quat_from_euler(&attitude);
        let f = slip_forces(&s, &ControlInput::new(0.0, 5.0), &p, &attitude).unwrap();
        assert_eq!(f.tires.front_y, 0.0);
        assert_eq!(f.tires.front_x, 0.0);
        assert_eq!(f.body.x, p.mass * p.gravity * 0.2f64.sin());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = VehicleParams {
            rear_axle_distance: -0.5,
            ..VehicleParams::default()
        };
        let err = slip_forces(&cruising(5.0), &ControlInput::new(0.0, 5.0), &p, &level());
        assert!(matches!(err, Err(Error::NonPhysicalParams(_))));
    }

    #[test]
    fn stiff_tires_approach_kinematic_yaw_rate() {
        let mut p = VehicleParams::default();
        p.tire_stiffness *= 100.0;
        p.front_axle_distance = 1.3;
        p.rear_axle_distance = 1.3;
        let dt = 1e-4;
        for delta in [0.05, 0.1, 0.2, -0.15] {
            let mut s = cruising(5.0);
            let u = ControlInput::new(delta, 5.0);
            for _ in 0..40_000 {
                let r = slip_step(&s, &u, &p, &level(), dt).unwrap();
                s.body_velocity = r.velocity;
                s.body_angular_velocity = r.angular_velocity;
            }
            let kinematic = s.body_velocity.x * delta.tan() / p.wheelbase();
            let rel = (s.body_angular_velocity.z - kinematic).abs() / kinematic.abs();
            assert!(rel < 0.05, "delta {delta}: {} vs {kinematic}", s.body_angular_velocity.z);
        }
    }

    #[test]
    fn model_kind_parsing() {
        assert_eq!("noslip3d".parse::<ModelKind>().unwrap(), ModelKind::NoSlip3D);
        assert_eq!("Slip3D".parse::<ModelKind>().unwrap(), ModelKind::Slip3D);
        assert_eq!("learned".parse::<ModelKind>().unwrap(), ModelKind::Learned);
        assert!("bogus".parse::<ModelKind>().is_err());
        assert!(Dynamics::new(ModelKind::Learned, None).is_err());
    }

    proptest! {
        #[test]
        fn tire_force_is_odd_and_bounded(a in -3.0f64..3.0, k in -3.0f64..3.0, fz in 0.0f64..20000.0) {
            let p = VehicleParams::default();
            let (fx, fy) = tire_force(a, k, fz, &p);
            let (fx_a, fy_a) = tire_force(-a, k, fz, &p);
            let (fx_k, fy_k) = tire_force(a, -k, fz, &p);
            prop_assert_eq!(fy_a, -fy);
            prop_assert_eq!(fx_a, fx);
            prop_assert_eq!(fx_k, -fx);
            prop_assert_eq!(fy_k, fy);
            prop_assert!(fx.hypot(fy) <= p.friction * fz + 1e-6);
        }

        #[test]
        fn steps_are_repeatable(vx in 0.5f64..15.0, vy in -2.0f64..2.0, wz in -1.0f64..1.0, d in -0.5f64..0.5) {
            let p = VehicleParams::default();
            let mut s = cruising(vx);
            s.body_velocity.y = vy;
            s.body_angular_velocity.z = wz;
            let u = ControlInput::new(d, vx + 1.0);
            let a = slip_step(&s, &u, &p, &level(), 0.1).unwrap();
            let b = slip_step(&s, &u, &p, &level(), 0.1).unwrap();
            prop_assert_eq!(a, b);
            let n = noslip_step(&s, &u, &p, 0.1);
            prop_assert_eq!(n.velocity.y, 0.0);
            prop_assert_eq!(n.velocity.z, 0.0);
        }
    }
}
