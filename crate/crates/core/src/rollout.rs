//! Open-loop rollouts: start from a recorded initial state, replay the
//! recorded controls, and integrate a dynamics model forward.
//!
//! Ground-contact models (NoSlip3D, Slip3D) get yaw from their own yaw rate
//! and roll, pitch and height from the terrain under the new position; the
//! roll and pitch rates stored in the state are the ones implied by that
//! re-projection. The learned model integrates its own predicted rates and
//! only sees the terrain through its input patch.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{learned_step, noslip_step, slip_step, BodyRates, Dynamics, ModelKind};
use crate::rotation::{body_rates_between, integrate_orientation, specific_force, EulerAngles, Vec3};
use crate::terrain::ElevationMap;
use crate::types::{ControlInput, Trajectory, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Integration substeps per stored sample.
    pub substeps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { substeps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub predicted: Trajectory,
    pub model: ModelKind,
    pub source_id: String,
}

/// Evaluates the model's next body rates without moving the vehicle.
pub fn model_rates(
    model: &Dynamics<'_>,
    state: &VehicleState,
    u: &ControlInput,
    map: &ElevationMap,
    params: &VehicleParams,
    dt: f64,
) -> Result<BodyRates> {
    match model {
        Dynamics::NoSlip3D => Ok(noslip_step(state, u, params, dt)),
        Dynamics::Slip3D => {
            let attitude = EulerAngles::from_quat(&state.orientation);
            slip_step(state, u, params, &attitude, dt)
        }
        Dynamics::Learned(weights) => {
            let e = state.euler();
            let patch = map.extract_patch(
                state.position.xy(),
                e.yaw,
                weights.patch.size,
                weights.patch.resolution,
            )?;
            learned_step(state, u, &patch, weights, params.gravity, dt)
        }
    }
}

/// Moves the vehicle one step using already-evaluated body rates.
pub fn advance(
    ground_contact: bool,
    state: &VehicleState,
    rates: &BodyRates,
    map: &ElevationMap,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    let q = state.orientation;
    let velocity = rates.velocity;
    let displacement = q.transform_vector(&velocity) * dt;
    let (position, orientation, angular_velocity) = if ground_contact {
        let yaw_rate = Vec3::new(0.0, 0.0, rates.angular_velocity.z);
        let heading = EulerAngles::from_quat(&integrate_orientation(&q, &yaw_rate, dt)).yaw;
        let xy = state.position.xy() + displacement.xy();
        let (position, orientation) = map.project_pose(xy, heading, params)?;
        let implied = body_rates_between(&q, &orientation, dt);
        (
            position,
            orientation,
            Vec3::new(implied.x, implied.y, rates.angular_velocity.z),
        )
    } else {
        let position = state.position + displacement;
        if !map.contains(Vector2::new(position.x, position.y)) {
            return Err(Error::OutOfBounds {
                x: position.x,
                y: position.y,
            });
        }
        let orientation = integrate_orientation(&q, &rates.angular_velocity, dt);
        (position, orientation, rates.angular_velocity)
    };
    let body_acceleration = specific_force(
        &state.body_velocity,
        &velocity,
        &angular_velocity,
        &orientation,
        params.gravity,
        dt,
    );
    Ok(VehicleState {
        time: state.time + dt,
        position,
        orientation,
        body_velocity: velocity,
        body_angular_velocity: angular_velocity,
        body_acceleration,
    })
}

/// One stored step, optionally split into substeps. The stored
/// acceleration always spans the whole step.
pub fn step(
    model: &Dynamics<'_>,
    state: &VehicleState,
    u: &ControlInput,
    map: &ElevationMap,
    params: &VehicleParams,
    dt: f64,
    cfg: &RolloutConfig,
) -> Result<VehicleState> {
    let n = cfg.substeps.max(1);
    if n == 1 {
        let rates = model_rates(model, state, u, map, params, dt)?;
        return advance(model.ground_contact(), state, &rates, map, params, dt);
    }
    let h = dt / n as f64;
    let mut s = *state;
    for _ in 0..n {
        let rates = model_rates(model, &s, u, map, params, h)?;
        s = advance(model.ground_contact(), &s, &rates, map, params, h)?;
    }
    s.time = state.time + dt;
    s.body_acceleration = specific_force(
        &state.body_velocity,
        &s.body_velocity,
        &s.body_angular_velocity,
        &s.orientation,
        params.gravity,
        dt,
    );
    Ok(s)
}

/// Rolls `model` out over the horizon of `gt`, starting from its first state.
pub fn rollout(
    model: &Dynamics<'_>,
    gt: &Trajectory,
    map: &ElevationMap,
    params: &VehicleParams,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    gt.validate()?;
    params.validate()?;
    let t0 = gt.states[0].time;
    let mut states = Vec::with_capacity(gt.len());
    states.push(gt.states[0]);
    for (k, u) in gt.controls[..gt.len() - 1].iter().enumerate() {
        let mut next = step(model, &states[k], u, map, params, gt.dt, cfg)?;
        next.time = t0 + (k + 1) as f64 * gt.dt;
        if !next.is_finite() {
            return Err(Error::InvalidTrajectory(format!("rollout diverged at step {}", k + 1)));
        }
        states.push(next);
    }
    Ok(RolloutResult {
        predicted: Trajectory {
            id: gt.id.clone(),
            dt: gt.dt,
            states,
            controls: gt.controls.clone(),
        },
        model: model.kind(),
        source_id: gt.id.clone(),
    })
}

/// [`rollout`] over many trajectories, in input order. Failures are
/// returned per trajectory. `jobs > 1` fans out over a thread pool.
pub fn rollout_batch(
    model: &Dynamics<'_>,
    dataset: &[Trajectory],
    map: &ElevationMap,
    params: &VehicleParams,
    cfg: &RolloutConfig,
    jobs: usize,
) -> Vec<Result<RolloutResult>> {
    let run = |gt: &Trajectory| rollout(model, gt, map, params, cfg);
    if jobs <= 1 || dataset.len() <= 1 {
        return dataset.iter().map(run).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| dataset.par_iter().map(run).collect()),
        Err(_) => dataset.iter().map(run).collect(),
    }
}
