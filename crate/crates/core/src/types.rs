//! Domain types shared by every module: vehicle state, controls,
//! trajectories and vehicle parameters.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rotation::{EulerAngles, Quat, Vec3};

/// Default sample period of every dataset, seconds.
pub const DEFAULT_DT: f64 = 0.1;

const TIME_TOLERANCE: f64 = 1e-9;

/// Rigid-body state of the vehicle at one instant.
///
/// `body_acceleration` is an IMU-style specific force: it includes the
/// reaction to gravity, so a vehicle at rest on flat ground reads `(0, 0, g)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub time: f64,
    pub position: Vec3,
    /// world <- body
    pub orientation: Quat,
    pub body_velocity: Vec3,
    pub body_angular_velocity: Vec3,
    pub body_acceleration: Vec3,
}

impl VehicleState {
    pub fn euler(&self) -> EulerAngles {
        EulerAngles::from_quat(&self.orientation)
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite()
            && self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
            && self.body_velocity.iter().all(|v| v.is_finite())
            && self.body_angular_velocity.iter().all(|v| v.is_finite())
            && self.body_acceleration.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Front wheel steering angle, radians, positive turns left.
    pub steering: f64,
    /// Wheel speed, m/s.
    pub wheel_speed: f64,
}

impl ControlInput {
    pub fn new(steering: f64, wheel_speed: f64) -> Self {
        Self {
            steering,
            wheel_speed,
        }
    }

    pub fn clamped(&self, max_steering: f64) -> Self {
        Self {
            steering: self.steering.clamp(-max_steering, max_steering),
            wheel_speed: self.wheel_speed,
        }
    }
}

/// Fixed-rate sequence of states and the controls applied at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub dt: f64,
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        dt: f64,
        states: Vec<VehicleState>,
        controls: Vec<ControlInput>,
    ) -> Result<Self> {
        let t = Self {
            id: id.into(),
            dt,
            states,
            controls,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidTrajectory(format!("dt must be positive, got {}", self.dt)));
        }
        if self.states.len() < 2 {
            return Err(Error::EmptyTrajectory);
        }
        if self.states.len() != self.controls.len() {
            return Err(Error::LengthMismatch {
                left: self.states.len(),
                right: self.controls.len(),
            });
        }
        for (i, s) in self.states.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::InvalidTrajectory(format!("state {i} is not finite")));
            }
            if (s.orientation.norm() - 1.0).abs() > TIME_TOLERANCE {
                return Err(Error::InvalidTrajectory(format!("state {i} orientation is not unit")));
            }
        }
        for (i, w) in self.states.windows(2).enumerate() {
            let step = w[1].time - w[0].time;
            if (step - self.dt).abs() > TIME_TOLERANCE {
                return Err(Error::InvalidTrajectory(format!(
                    "timestep {i} spans {step} s, expected {}",
                    self.dt
                )));
            }
        }
        if let Some(i) = self
            .controls
            .iter()
            .position(|u| !u.steering.is_finite() || !u.wheel_speed.is_finite())
        {
            return Err(Error::InvalidTrajectory(format!("control {i} is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of steps, `len - 1`.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn duration(&self) -> f64 {
        self.horizon() as f64 * self.dt
    }
}

/// Single-track vehicle parameters.
///
/// `track_width` and `ride_height` are only used to place the vehicle on the
/// terrain; the dynamics themselves stay single-track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub front_axle_distance: f64,
    pub rear_axle_distance: f64,
    pub gravity: f64,
    pub tire_stiffness: f64,
    pub tire_shape: f64,
    pub friction: f64,
    pub drive_gain: f64,
    pub max_steering: f64,
    pub track_width: f64,
    pub ride_height: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1000.0,
            yaw_inertia: 1500.0,
            front_axle_distance: 1.2,
            rear_axle_distance: 1.4,
            gravity: 9.81,
            tire_stiffness: 4.0,
            tire_shape: 1.5,
            friction: 0.8,
            drive_gain: 1.0,
            max_steering: 0.6,
            track_width: 1.5,
            ride_height: 0.0,
        }
    }
}

const PARAM_KEYS: [&str; 12] = [
    "mass",
    "yaw_inertia",
    "front_axle_distance",
    "rear_axle_distance",
    "gravity",
    "tire_stiffness",
    "tire_shape",
    "friction",
    "drive_gain",
    "max_steering",
    "track_width",
    "ride_height",
];

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.front_axle_distance + self.rear_axle_distance
    }

    /// Fraction of the normal load carried by the front axle.
    pub fn front_load_fraction(&self) -> f64 {
        self.rear_axle_distance / self.wheelbase()
    }

    pub fn rear_load_fraction(&self) -> f64 {
        self.front_axle_distance / self.wheelbase()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("front_axle_distance", self.front_axle_distance),
            ("rear_axle_distance", self.rear_axle_distance),
            ("gravity", self.gravity),
            ("tire_stiffness", self.tire_stiffness),
            ("tire_shape", self.tire_shape),
            ("friction", self.friction),
            ("drive_gain", self.drive_gain),
            ("max_steering", self.max_steering),
            ("track_width", self.track_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPhysicalParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_steering >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::NonPhysicalParams("max_steering must stay below pi/2".into()));
        }
        if !self.ride_height.is_finite() {
            return Err(Error::NonPhysicalParams("ride_height must be finite".into()));
        }
        Ok(())
    }

    fn values(&self) -> [f64; 12] {
        [
            self.mass,
            self.yaw_inertia,
            self.front_axle_distance,
            self.rear_axle_distance,
            self.gravity,
            self.tire_stiffness,
            self.tire_shape,
            self.friction,
            self.drive_gain,
            self.max_steering,
            self.track_width,
            self.ride_height,
        ]
    }

    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "mass" => &mut self.mass,
            "yaw_inertia" => &mut self.yaw_inertia,
            "front_axle_distance" => &mut self.front_axle_distance,
            "rear_axle_distance" => &mut self.rear_axle_distance,
            "gravity" => &mut self.gravity,
            "tire_stiffness" => &mut self.tire_stiffness,
            "tire_shape" => &mut self.tire_shape,
            "friction" => &mut self.friction,
            "drive_gain" => &mut self.drive_gain,
            "max_steering" => &mut self.max_steering,
            "track_width" => &mut self.track_width,
            "ride_height" => &mut self.ride_height,
            _ => return None,
        })
    }

    /// `key = value` lines; `#` starts a comment. Keys absent from the text
    /// keep their default value.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut p = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, n + 1, "expected `key = value`"))?;
            let key = key.trim();
            let slot = p
                .slot(key)
                .ok_or_else(|| Error::parse(path, n + 1, format!("unknown parameter `{key}`")))?;
            *slot = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, n + 1, format!("bad number for `{key}`")))?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in PARAM_KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k} = {v:?}");
        }
        out
    }
}
