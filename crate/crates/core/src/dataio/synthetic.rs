//! Seeded synthetic terrain and driving data.
//!
//! Terrain is a sum of Gaussian bumps. Ground truth is the Slip3D model
//! driven by a sinusoidal steering script at a constant wheel speed, with
//! optional Gaussian process noise on the predicted rates.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::models::Dynamics;
use crate::rollout::{advance, model_rates};
use crate::rotation::{specific_force, Vec3};
use crate::terrain::ElevationMap;
use crate::types::{ControlInput, Trajectory, VehicleParams, VehicleState};

/// `delta(t) = amplitude * sin(2 pi t / period + phase)` with period and
/// phase drawn per trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringScript {
    pub amplitude: f64,
    pub period_range: (f64, f64),
}

impl SteeringScript {
    pub fn straight() -> Self {
        Self {
            amplitude: 0.0,
            period_range: (1.0, 1.0),
        }
    }
}

/// Standard deviations of the per-step perturbations of the predicted rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProcessNoise {
    /// m/s, on body `V_x` and `V_y`
    pub velocity_std: f64,
    /// rad/s, on body yaw rate
    pub yaw_rate_std: f64,
}

impl ProcessNoise {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.velocity_std == 0.0 && self.yaw_rate_std == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dataset_id: String,
    pub trajectory_count: usize,
    pub horizon_s: f64,
    pub dt: f64,
    /// Side length of the square map, m.
    pub map_extent: f64,
    pub map_resolution: f64,
    /// Standard deviation of bump amplitudes, m.
    pub roughness: f64,
    /// Bumps per 100 m^2.
    pub bump_density: f64,
    pub bump_radius: (f64, f64),
    pub speed_range: (f64, f64),
    pub steering: SteeringScript,
    pub noise: ProcessNoise,
    /// Parameters of the vehicle that produced the data.
    pub truth_params: VehicleParams,
    pub split_fractions: [f64; 3],
}

impl SyntheticConfig {
    /// Moderate off-road driving around 8 m/s over rolling terrain.
    pub fn nominal() -> Self {
        Self {
            dataset_id: "nominal".into(),
            trajectory_count: 60,
            horizon_s: 4.0,
            dt: crate::types::DEFAULT_DT,
            map_extent: 240.0,
            map_resolution: 0.5,
            roughness: 0.8,
            bump_density: 1.0,
            bump_radius: (2.0, 6.0),
            speed_range: (6.5, 9.5),
            steering: SteeringScript {
                amplitude: 0.25,
                period_range: (2.0, 5.0),
            },
            noise: ProcessNoise {
                velocity_std: 0.02,
                yaw_rate_std: 0.005,
            },
            truth_params: VehicleParams::default(),
            split_fractions: [0.8, 0.1, 0.1],
        }
    }

    /// Scales speeds and steering amplitude.
    pub fn scaled(mut self, id: &str, speed: f64, steering: f64) -> Self {
        self.dataset_id = id.to_string();
        self.speed_range = (self.speed_range.0 * speed, self.speed_range.1 * speed);
        self.steering.amplitude *= steering;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.trajectory_count == 0 {
            return bad("trajectory count must be positive".into());
        }
        if !(self.dt > 0.0) || !(self.horizon_s >= self.dt) {
            return bad(format!("horizon {} s must cover at least one step of {} s", self.horizon_s, self.dt));
        }
        let steps = self.horizon_s / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps {
            return bad(format!("horizon {} s is not a multiple of dt {} s", self.horizon_s, self.dt));
        }
        if !(self.map_resolution > 0.0) || !(self.map_extent >= 4.0 * self.map_resolution) {
            return bad("map extent and resolution must be positive".into());
        }
        if !(self.roughness >= 0.0) || !(self.bump_density >= 0.0) {
            return bad("roughness and bump density must be non-negative".into());
        }
        if !(self.bump_radius.0 > 0.0 && self.bump_radius.0 <= self.bump_radius.1) {
            return bad("bump radius range must be positive and ordered".into());
        }
        if !(self.speed_range.0 > 0.0 && self.speed_range.0 <= self.speed_range.1) {
            return bad(format!("speed range {:?} must be positive and ordered", self.speed_range));
        }
        let s = self.steering;
        if !(s.amplitude >= 0.0 && s.amplitude <= self.truth_params.max_steering) {
            return bad(format!("steering amplitude {} outside [0, {}]", s.amplitude, self.truth_params.max_steering));
        }
        if !(s.period_range.0 > 0.0 && s.period_range.0 <= s.period_range.1) {
            return bad("steering period range must be positive and ordered".into());
        }
        if !(self.noise.velocity_std >= 0.0 && self.noise.yaw_rate_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        let travel = self.speed_range.1 * self.horizon_s;
        if travel * 2.0 + 10.0 > self.map_extent {
            return bad(format!(
                "map extent {} m is too small for {travel:.1} m of travel",
                self.map_extent
            ));
        }
        self.truth_params
            .validate()
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub map: ElevationMap,
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Bump {
    center: Vector2<f64>,
    amplitude: f64,
    radius: f64,
}

fn build_terrain(seed: u64, cfg: &SyntheticConfig) -> Result<ElevationMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let half = cfg.map_extent / 2.0;
    let cells = (cfg.map_extent / cfg.map_resolution).round() as usize + 1;
    let count = if cfg.roughness > 0.0 {
        (cfg.bump_density * cfg.map_extent * cfg.map_extent / 100.0).round() as usize
    } else {
        0
    };
    let amp = Normal::new(0.0, cfg.roughness.max(f64::MIN_POSITIVE)).expect("finite std");
    let bumps: Vec<Bump> = (0..count)
        .map(|_| Bump {
            center: Vector2::new(rng.random_range(-half..half), rng.random_range(-half..half)),
            amplitude: amp.sample(&mut rng),
            radius: rng.random_range(cfg.bump_radius.0..=cfg.bump_radius.1),
        })
        .collect();
    // bucket bumps on a coarse grid so each cell only visits nearby bumps
    let reach = 4.0 * cfg.bump_radius.1;
    let nb = ((cfg.map_extent / reach).ceil() as usize).max(1);
    let bucket_of = |v: f64| (((v + half) / reach).floor().max(0.0) as usize).min(nb - 1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nb * nb];
    for (i, b) in bumps.iter().enumerate() {
        buckets[bucket_of(b.center.y) * nb + bucket_of(b.center.x)].push(i);
    }
    let origin = Vector2::new(-half, -half);
    ElevationMap::from_fn(origin, cfg.map_resolution, cells, cells, |x, y| {
        let (bx, by) = (bucket_of(x), bucket_of(y));
        let mut h = 0.0;
        for gy in by.saturating_sub(1)..=(by + 1).min(nb - 1) {
            for gx in bx.saturating_sub(1)..=(bx + 1).min(nb - 1) {
                for &i in &buckets[gy * nb + gx] {
                    let b = &bumps[i];
                    let d2 = (x - b.center.x).powi(2) + (y - b.center.y).powi(2);
                    h += b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
            }
        }
        // stored at f32 precision so binary map files reproduce it exactly
        h as f32 as f64
    })
}

fn drive(
    id: String,
    map: &ElevationMap,
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let p = &cfg.truth_params;
    let steps = (cfg.horizon_s / cfg.dt).round() as usize;
    let travel = cfg.speed_range.1 * cfg.horizon_s + 5.0;
    let half = cfg.map_extent / 2.0 - travel;
    let start = Vector2::new(rng.random_range(-half..=half), rng.random_range(-half..=half));
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
    let period = rng.random_range(cfg.steering.period_range.0..=cfg.steering.period_range.1);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let vel_noise = Normal::new(0.0, cfg.noise.velocity_std).expect("checked std");
    let yaw_noise = Normal::new(0.0, cfg.noise.yaw_rate_std).expect("checked std");

    let (position, orientation) = map.project_pose(start, yaw, p)?;
    let velocity = Vec3::new(speed, 0.0, 0.0);
    let mut state = VehicleState {
        time: 0.0,
        position,
        orientation,
        body_velocity: velocity,
        body_angular_velocity: Vec3::zeros(),
        body_acceleration: specific_force(&velocity, &velocity, &Vec3::zeros(), &orientation, p.gravity, cfg.dt),
    };
    let controls: Vec<ControlInput> = (0..=steps)
        .map(|k| {
            let t = k as f64 * cfg.dt;
            let delta = cfg.steering.amplitude * (std::f64::consts::TAU * t / period + phase).sin();
            ControlInput::new(delta, speed)
        })
        .collect();
    let model = Dynamics::Slip3D;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(state);
    for (k, u) in controls[..steps].iter().enumerate() {
        let mut rates = model_rates(&model, &state, u, map, p, cfg.dt)?;
        if !cfg.noise.is_zero() {
            rates.velocity.x += vel_noise.sample(rng);
            rates.velocity.y += vel_noise.sample(rng);
            rates.angular_velocity.z += yaw_noise.sample(rng);
        }
        state = advance(true, &state, &rates, map, p, cfg.dt)?;
        state.time = (k + 1) as f64 * cfg.dt;
        states.push(state);
    }
    Trajectory::new(id, cfg.dt, states, controls)
}

/// Builds a map and `trajectory_count` ground-truth trajectories. The same
/// seed and config always give bit-identical output.
pub fn generate_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let map = build_terrain(seed, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2));
    let mut trajectories = Vec::with_capacity(cfg.trajectory_count);
    for k in 0..cfg.trajectory_count {
        let id = format!("{}-{k:04}", cfg.dataset_id);
        let mut attempt = 0;
        let t = loop {
            match drive(id.clone(), &map, cfg, &mut rng) {
                Ok(t) => break t,
                Err(Error::OutOfBounds { .. }) if attempt < 50 => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        trajectories.push(t);
    }
    let entries = trajectories
        .iter()
        .map(|t| ManifestEntry {
            id: t.id.clone(),
            file: format!("trajectories/{}.txt", t.id).into(),
            split: Split::Train,
        })
        .collect();
    let manifest = super::split(
        &DatasetManifest {
            dataset: cfg.dataset_id.clone(),
            map: "map.bin".into(),
            horizon_s: cfg.horizon_s,
            seed: Some(seed),
            entries,
        },
        cfg.split_fractions,
        seed,
    )?;
    Ok(SyntheticDataset {
        map,
        manifest,
        trajectories,
    })
}
