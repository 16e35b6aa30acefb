//! Vehicle dynamics models for off-road driving, an energy-based
//! aggressiveness score for trajectories, and a rollout benchmark that
//! reports horizon max normed errors per state group.

// NaN-rejecting checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod dataio;
pub mod energy;
pub mod error;
pub mod learn;
pub mod models;
pub mod rollout;
pub mod rotation;
pub mod terrain;
pub mod types;

pub use error::{Error, ErrorClass, Result};
pub use models::{Dynamics, ModelKind};
pub use rotation::{wrap_angle, EulerAngles, Quat, Vec3};
pub use terrain::{ElevationMap, TerrainPatch};
pub use types::{ControlInput, Trajectory, VehicleParams, VehicleState};
