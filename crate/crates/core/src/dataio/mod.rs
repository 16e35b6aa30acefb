//! File formats, resampling, chunking and dataset manifests.
//!
//! Trajectory file layout: a header block of `#` lines followed by one
//! whitespace-separated record per timestep with the fields listed in
//! [`TRAJECTORY_FIELDS`]. Numbers are written in shortest round-trip form,
//! so reading a file back gives bit-identical values.

mod synthetic;

pub use synthetic::{generate_synthetic, ProcessNoise, SteeringScript, SyntheticConfig, SyntheticDataset};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Quaternion;

use crate::error::{Error, Result};
use crate::rotation::{Quat, Vec3};
use crate::terrain::ElevationMap;
use crate::types::{ControlInput, Trajectory, VehicleState};

const TRAJECTORY_MAGIC: &str = "# terradyn-trajectory v1";
const MANIFEST_MAGIC: &str = "# terradyn-manifest v1";

pub const TRAJECTORY_FIELDS: [&str; 19] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "ax", "ay", "az", "steer",
    "wheel_speed",
];

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(Error::InvalidTrajectory(format!(
            "identifier `{id}` must be non-empty without whitespace or commas"
        )));
    }
    Ok(())
}

pub fn trajectory_to_text(t: &Trajectory) -> Result<String> {
    check_id(&t.id)?;
    let mut out = format!("{TRAJECTORY_MAGIC}\n# id {}\n# dt {:?}\n# fields {}\n", t.id, t.dt, TRAJECTORY_FIELDS.join(" "));
    for (s, u) in t.states.iter().zip(&t.controls) {
        let q = s.orientation.quaternion();
        let vals = [
            s.time,
            s.position.x,
            s.position.y,
            s.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            s.body_velocity.x,
            s.body_velocity.y,
            s.body_velocity.z,
            s.body_angular_velocity.x,
            s.body_angular_velocity.y,
            s.body_angular_velocity.z,
            s.body_acceleration.x,
            s.body_acceleration.y,
            s.body_acceleration.z,
            u.steering,
            u.wheel_speed,
        ];
        for (i, v) in vals.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn trajectory_from_text(text: &str, path: &Path) -> Result<Trajectory> {
    let mut id = None;
    let mut dt = None;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == TRAJECTORY_MAGIC => {}
        _ => return Err(Error::parse(path, 1, "missing trajectory header")),
    }
    for (n, line) in lines {
        let ln = n + 1;
        if let Some(h) = line.strip_prefix('#') {
            let mut it = h.split_whitespace();
            match (it.next(), it.next()) {
                (Some("id"), Some(v)) => id = Some(v.to_string()),
                (Some("dt"), Some(v)) => dt = Some(v.parse::<f64>().map_err(|_| Error::parse(path, ln, "bad dt"))?),
                (Some("fields"), _) => {
                    let fields: Vec<&str> = h.split_whitespace().skip(1).collect();
                    if fields != TRAJECTORY_FIELDS {
                        return Err(Error::parse(path, ln, "unexpected field list"));
                    }
                }
                _ => {}
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut v = [0.0; 19];
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count == v.len() {
                return Err(Error::parse(path, ln, "too many fields"));
            }
            v[count] = tok.parse().map_err(|_| Error::parse(path, ln, format!("bad number `{tok}`")))?;
            count += 1;
        }
        if count != v.len() {
            return Err(Error::parse(path, ln, format!("expected 19 fields, got {count}")));
        }
        let q: Quaternion<f64> = Quaternion::new(v[4], v[5], v[6], v[7]);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::parse(path, ln, "orientation is not a unit quaternion"));
        }
        states.push(VehicleState {
            time: v[0],
            position: Vec3::new(v[1], v[2], v[3]),
            orientation: Quat::new_unchecked(q),
            body_velocity: Vec3::new(v[8], v[9], v[10]),
            body_angular_velocity: Vec3::new(v[11], v[12], v[13]),
            body_acceleration: Vec3::new(v[14], v[15], v[16]),
        });
        controls.push(ControlInput {
            steering: v[17],
            wheel_speed: v[18],
        });
    }
    let id = id.ok_or_else(|| Error::parse(path, 0, "missing `# id` header"))?;
    let dt = dt.ok_or_else(|| Error::parse(path, 0, "missing `# dt` header"))?;
    Trajectory::new(id, dt, states, controls)
}

pub fn save_trajectory(t: &Trajectory, path: &Path) -> Result<()> {
    write_atomic(path, trajectory_to_text(t)?.as_bytes())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    trajectory_from_text(&text, path)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::ConfigInvalid(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Stream of timestamped samples of one channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Series {
    pub fn push(&mut self, t: f64, v: &[f64]) {
        self.times.push(t);
        self.values.push(v.to_vec());
    }

    fn check(&self, name: &str, width: usize) -> Result<()> {
        let cov = |reason: String| Error::InsufficientCoverage {
            channel: name.to_string(),
            reason,
        };
        if self.times.len() != self.values.len() {
            return Err(cov("timestamp and value counts differ".into()));
        }
        if self.times.is_empty() {
            return Err(cov("no samples".into()));
        }
        if self.values.iter().any(|v| v.len() != width) {
            return Err(Error::ShapeMismatch(format!("channel `{name}` samples must have {width} values")));
        }
        if self.times.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(cov("timestamps decrease".into()));
        }
        Ok(())
    }

    /// Linear interpolation; exact sample values at sample times.
    fn sample(&self, name: &str, t: f64, max_gap: f64, out: &mut [f64]) -> Result<()> {
        let idx = self.times.partition_point(|&x| x < t);
        if idx < self.times.len() && self.times[idx] == t {
            out.copy_from_slice(&self.values[idx]);
            return Ok(());
        }
        if idx == 0 || idx == self.times.len() {
            return Err(Error::InsufficientCoverage {
                channel: name.to_string(),
                reason: format!("no samples around t = {t}"),
            });
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        if t1 - t0 > max_gap {
            return Err(Error::InsufficientCoverage {
                channel: name.to_string(),
                reason: format!("gap of {:.3} s at t = {t0}", t1 - t0),
            });
        }
        let w = (t - t0) / (t1 - t0);
        for ((o, a), b) in out.iter_mut().zip(&self.values[idx - 1]).zip(&self.values[idx]) {
            *o = a + w * (b - a);
        }
        Ok(())
    }
}

/// Unsynchronised sensor log. Each channel has its own timestamps.
/// Orientation samples are `(w, x, y, z)`; controls are `(steering, wheel_speed)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawLog {
    pub id: String,
    pub position: Series,
    pub orientation: Series,
    pub velocity: Series,
    pub angular_velocity: Series,
    pub acceleration: Series,
    pub controls: Series,
}

impl RawLog {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        let mut log = RawLog {
            id: t.id.clone(),
            ..Default::default()
        };
        for (s, u) in t.states.iter().zip(&t.controls) {
            let q = s.orientation.quaternion();
            log.position.push(s.time, s.position.as_slice());
            log.orientation.push(s.time, &[q.w, q.i, q.j, q.k]);
            log.velocity.push(s.time, s.body_velocity.as_slice());
            log.angular_velocity.push(s.time, s.body_angular_velocity.as_slice());
            log.acceleration.push(s.time, s.body_acceleration.as_slice());
            log.controls.push(s.time, &[u.steering, u.wheel_speed]);
        }
        log
    }

    fn channels(&self) -> [(&'static str, &Series, usize); 6] {
        [
            ("position", &self.position, 3),
            ("orientation", &self.orientation, 4),
            ("velocity", &self.velocity, 3),
            ("angular_velocity", &self.angular_velocity, 3),
            ("acceleration", &self.acceleration, 3),
            ("controls", &self.controls, 2),
        ]
    }
}

/// Flips quaternion samples onto the hemisphere of their predecessor so
/// componentwise interpolation takes the short way round.
fn align_hemispheres(series: &Series) -> Series {
    let mut out = series.clone();
    for i in 1..out.values.len() {
        let dot: f64 = out.values[i].iter().zip(&out.values[i - 1]).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            out.values[i].iter_mut().for_each(|v| *v = -*v);
        }
    }
    out
}

/// Resamples a log onto a uniform grid at `rate` Hz over the window every
/// channel covers.
pub fn resample(log: &RawLog, rate: f64) -> Result<Trajectory> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::ConfigInvalid(format!("rate must be positive, got {rate}")));
    }
    for (name, s, w) in log.channels() {
        s.check(name, w)?;
    }
    let start = log.channels().iter().map(|c| c.1.times[0]).fold(f64::NEG_INFINITY, f64::max);
    let end = log
        .channels()
        .iter()
        .map(|c| *c.1.times.last().expect("checked non-empty"))
        .fold(f64::INFINITY, f64::min);
    let dt = 1.0 / rate;
    if !(end > start) {
        return Err(Error::InsufficientCoverage {
            channel: "all".into(),
            reason: "channels do not overlap".into(),
        });
    }
    let n = ((end - start) / dt + 1e-9).floor() as usize + 1;
    let max_gap = 3.0 / rate;
    let orientation = align_hemispheres(&log.orientation);
    let mut states = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    let (mut p, mut q, mut v, mut w, mut a, mut u) = ([0.0; 3], [0.0; 4], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 2]);
    for k in 0..n {
        let t = start + k as f64 * dt;
        log.position.sample("position", t, max_gap, &mut p)?;
        orientation.sample("orientation", t, max_gap, &mut q)?;
        log.velocity.sample("velocity", t, max_gap, &mut v)?;
        log.angular_velocity.sample("angular_velocity", t, max_gap, &mut w)?;
        log.acceleration.sample("acceleration", t, max_gap, &mut a)?;
        log.controls.sample("controls", t, max_gap, &mut u)?;
        let quat: Quaternion<f64> = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !(norm > 0.0) {
            return Err(Error::InsufficientCoverage {
                channel: "orientation".into(),
                reason: format!("degenerate quaternion at t = {t}"),
            });
        }
        let orientation = if (norm - 1.0).abs() <= 1e-12 {
            Quat::new_unchecked(quat)
        } else {
            Quat::new_normalize(quat)
        };
        states.push(VehicleState {
            time: t,
            position: Vec3::from(p),
            orientation,
            body_velocity: Vec3::from(v),
            body_angular_velocity: Vec3::from(w),
            body_acceleration: Vec3::from(a),
        });
        controls.push(ControlInput {
            steering: u[0],
            wheel_speed: u[1],
        });
    }
    Trajectory::new(log.id.clone(), dt, states, controls)
}

/// Consecutive windows of `horizon_s` that share their boundary state; the
/// trailing remainder is dropped.
pub fn chunk(t: &Trajectory, horizon_s: f64) -> Result<Vec<Trajectory>> {
    let steps = horizon_steps(horizon_s, t.dt)?;
    chunk_with_stride(t, horizon_s, steps)
}

/// Like [`chunk`] with windows starting every `stride` steps.
pub fn chunk_with_stride(t: &Trajectory, horizon_s: f64, stride: usize) -> Result<Vec<Trajectory>> {
    let steps = horizon_steps(horizon_s, t.dt)?;
    if stride == 0 {
        return Err(Error::ConfigInvalid("stride must be at least one step".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + steps < t.len() {
        let end = start + steps + 1;
        out.push(Trajectory {
            id: format!("{}-{:03}", t.id, out.len()),
            dt: t.dt,
            states: t.states[start..end].to_vec(),
            controls: t.controls[start..end].to_vec(),
        });
        start += stride;
    }
    Ok(out)
}

fn horizon_steps(horizon_s: f64, dt: f64) -> Result<usize> {
    let steps = horizon_s / dt;
    let rounded = steps.round();
    if !(rounded >= 1.0) || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(Error::ConfigInvalid(format!("horizon {horizon_s} s is not a positive multiple of dt {dt} s")));
    }
    Ok(rounded as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::ConfigInvalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset: String,
    /// Relative to the manifest's directory.
    pub map: PathBuf,
    pub horizon_s: f64,
    pub seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\ndataset = {}\nmap = {}\nhorizon_s = {:?}\n",
            self.dataset,
            self.map.display(),
            self.horizon_s
        );
        if let Some(s) = self.seed {
            let _ = writeln!(out, "seed = {s}");
        }
        for e in &self.entries {
            let _ = writeln!(out, "trajectory {} {} {}", e.id, e.file.display(), e.split.name());
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_MAGIC => {}
            _ => return Err(Error::parse(path, 1, "missing manifest header")),
        }
        let (mut dataset, mut map, mut horizon_s, mut seed) = (None, None, None, None);
        let mut entries = Vec::new();
        for (n, line) in lines {
            let ln = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("trajectory ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let [id, file, split] = f.as_slice() else {
                    return Err(Error::parse(path, ln, "expected `trajectory <id> <file> <split>`"));
                };
                if entries.iter().any(|e: &ManifestEntry| e.id == *id) {
                    return Err(Error::parse(path, ln, format!("duplicate trajectory `{id}`")));
                }
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    file: PathBuf::from(file),
                    split: split.parse().map_err(|_| Error::parse(path, ln, format!("unknown split `{split}`")))?,
                });
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(path, ln, "expected `key = value`"));
            };
            let v = v.trim();
            match k.trim() {
                "dataset" => dataset = Some(v.to_string()),
                "map" => map = Some(PathBuf::from(v)),
                "horizon_s" => horizon_s = Some(v.parse().map_err(|_| Error::parse(path, ln, "bad horizon"))?),
                "seed" => seed = Some(v.parse().map_err(|_| Error::parse(path, ln, "bad seed"))?),
                other => return Err(Error::parse(path, ln, format!("unknown key `{other}`"))),
            }
        }
        Ok(Self {
            dataset: dataset.ok_or_else(|| Error::parse(path, 0, "missing `dataset`"))?,
            map: map.ok_or_else(|| Error::parse(path, 0, "missing `map`"))?,
            horizon_s: horizon_s.ok_or_else(|| Error::parse(path, 0, "missing `horizon_s`"))?,
            seed,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// FNV-1a over the id, mixed with the seed through a splitmix64 finaliser.
fn split_hash(id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Assigns each trajectory to train/val/test from a seeded hash of its id.
/// An id's split depends only on the id, the fractions and the seed.
pub fn split(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::ConfigInvalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut out = manifest.clone();
    for e in &mut out.entries {
        let u = (split_hash(&e.id, seed) >> 11) as f64 / (1u64 << 53) as f64;
        let mut bucket = if u < fractions[0] {
            0
        } else if u < fractions[0] + fractions[1] {
            1
        } else {
            2
        };
        // rounding at the top of the range can land in an empty bucket
        while fractions[bucket] == 0.0 {
            bucket -= 1;
        }
        e.split = [Split::Train, Split::Val, Split::Test][bucket];
    }
    Ok(out)
}

/// Writes the map, every trajectory and the manifest under `dir`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, map: &ElevationMap, trajectories: &[Trajectory]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if manifest.entries.len() != trajectories.len() {
        return Err(Error::LengthMismatch {
            left: manifest.entries.len(),
            right: trajectories.len(),
        });
    }
    write_atomic(&dir.join(&manifest.map), &map.to_binary())?;
    for (e, t) in manifest.entries.iter().zip(trajectories) {
        if e.id != t.id {
            return Err(Error::InvalidTrajectory(format!("manifest entry `{}` holds trajectory `{}`", e.id, t.id)));
        }
        let path = dir.join(&e.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_trajectory(t, &path)?;
    }
    let path = dir.join("manifest.txt");
    write_atomic(&path, manifest.to_text().as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub map: ElevationMap,
    pub trajectories: Vec<Trajectory>,
}

/// Reads a manifest, its map and the trajectories of `split` (all when `None`).
pub fn load_dataset(manifest_path: &Path, split: Option<Split>) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let map = ElevationMap::load(&base.join(&manifest.map))?;
    let mut trajectories = Vec::new();
    for e in manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let t = load_trajectory(&base.join(&e.file))?;
        if t.id != e.id {
            return Err(Error::InvalidTrajectory(format!("file for `{}` holds trajectory `{}`", e.id, t.id)));
        }
        trajectories.push(t);
    }
    Ok(LoadedDataset {
        manifest,
        map,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::EulerAngles;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(seed: u64, n: usize) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let states = (0..n)
            .map(|k| VehicleState {
                time: 1.0 + k as f64 * 0.1,
                position: v(50.0),
                orientation: EulerAngles::new(v(0.3).x, v(0.3).y, v(3.0).z).to_quat(),
                body_velocity: v(8.0),
                body_angular_velocity: v(1.0),
                body_acceleration: v(10.0),
            })
            .collect();
        let controls = (0..n).map(|k| ControlInput::new(0.01 * k as f64, 7.0 + 1.0 / 3.0)).collect();
        Trajectory::new(format!("traj{seed}"), 0.1, states, controls).unwrap()
    }

    #[test]
    fn trajectory_text_round_trip() {
        let t = random_traj(1, 25);
        let text = trajectory_to_text(&t).unwrap();
        let back = trajectory_from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, t);
        assert_eq!(trajectory_to_text(&back).unwrap(), text);
    }

    #[test]
    fn trajectory_parse_errors() {
        let t = random_traj(2, 3);
        let text = trajectory_to_text(&t).unwrap();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(trajectory_from_text(&truncated, Path::new("x")), Err(Error::EmptyTrajectory)));
        let broken = text.replacen(" 0.", " zz", 1);
        assert!(matches!(trajectory_from_text(&broken, Path::new("x")), Err(Error::Parse { .. })));
        assert!(trajectory_from_text("hello", Path::new("x")).is_err());
        let mut bad = t.clone();
        bad.id = "has space".into();
        assert!(trajectory_to_text(&bad).is_err());
    }

    #[test]
    fn midpoint_interpolation() {
        let mut t = random_traj(3, 3);
        t.states[0].body_velocity.x = 0.0;
        t.states[2].body_velocity.x = 2.0;
        let mut log = RawLog::from_trajectory(&t);
        log.velocity.times.remove(1);
        log.velocity.values.remove(1);
        let r = resample(&log, 10.0).unwrap();
        assert!((r.states[1].body_velocity.x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_log_is_unchanged() {
        let t = random_traj(4, 30);
        let r = resample(&RawLog::from_trajectory(&t), 10.0).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn sinusoid_interpolation_error_bound() {
        let f = 0.7;
        let w = std::f64::consts::TAU * f;
        let mut log = RawLog {
            id: "sin".into(),
            ..Default::default()
        };
        // a 100 Hz source with a slight timing jitter
        for k in 0..=1000 {
            let t = k as f64 * 0.01 + if k % 2 == 1 { 0.002 } else { 0.0 };
            let s = (w * t).sin();
            log.position.push(t, &[s, 0.0, 0.0]);
            log.orientation.push(t, &[1.0, 0.0, 0.0, 0.0]);
            log.velocity.push(t, &[0.0; 3]);
            log.angular_velocity.push(t, &[0.0; 3]);
            log.acceleration.push(t, &[0.0; 3]);
            log.controls.push(t, &[0.0; 2]);
        }
        let r = resample(&log, 10.0).unwrap();
        // source spacing is at most 0.012 s
        let bound = w * w * 0.012 * 0.012 / 8.0;
        for s in &r.states {
            assert!((s.position.x - (w * s.time).sin()).abs() <= bound, "t = {}", s.time);
        }
        // looser 10 Hz form of the same bound
        assert!(bound < w * w * 0.01 / 8.0);
    }

    #[test]
    fn gaps_are_rejected() {
        let t = random_traj(5, 20);
        let mut log = RawLog::from_trajectory(&t);
        for _ in 0..4 {
            log.acceleration.times.remove(8);
            log.acceleration.values.remove(8);
        }
        assert!(matches!(resample(&log, 10.0), Err(Error::InsufficientCoverage { .. })));
        let mut ok = RawLog::from_trajectory(&t);
        for _ in 0..2 {
            ok.acceleration.times.remove(8);
            ok.acceleration.values.remove(8);
        }
        assert!(resample(&ok, 10.0).is_ok());
    }

    #[test]
    fn quaternion_sign_flips_are_harmless() {
        let t = random_traj(6, 10);
        let mut log = RawLog::from_trajectory(&t);
        for v in log.orientation.values.iter_mut().skip(1).step_by(2) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        // offset the orientation stamps so every output must be interpolated
        let mut shifted = log.clone();
        shifted.orientation.times.iter_mut().for_each(|t| *t -= 0.05);
        shifted.orientation.push(t.states[9].time + 0.05, &[1.0, 0.0, 0.0, 0.0]);
        let r = resample(&shifted, 10.0).unwrap();
        for s in &r.states {
            assert!((s.orientation.quaternion().norm() - 1.0).abs() < 1e-12);
        }
        let idx = 3;
        let a = t.states[idx].orientation;
        let b = t.states[idx + 1].orientation;
        let mid = r.states[idx].orientation;
        assert!(mid.angle_to(&a) <= a.angle_to(&b) + 1e-9);
    }

    #[test]
    fn chunk_counts() {
        let t = random_traj(7, 81);
        let c = chunk(&t, 4.0).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|x| x.len() == 41));
        assert!(chunk(&random_traj(8, 30), 4.0).unwrap().is_empty());
        assert!(chunk(&t, 0.25).is_err());
    }

    #[test]
    fn chunks_reassemble_prefix() {
        let t = random_traj(9, 100);
        let c = chunk(&t, 3.0).unwrap();
        let mut joined = c[0].states.clone();
        for w in &c[1..] {
            assert_eq!(w.states[0], *joined.last().unwrap());
            joined.extend_from_slice(&w.states[1..]);
        }
        assert_eq!(joined[..], t.states[..joined.len()]);
        assert!(t.len() - joined.len() < 30);
    }

    #[test]
    fn resample_chunk_serialize_is_bit_exact() {
        let t = random_traj(10, 60);
        let r = resample(&RawLog::from_trajectory(&t), 10.0).unwrap();
        for w in chunk(&r, 2.0).unwrap() {
            let back = trajectory_from_text(&trajectory_to_text(&w).unwrap(), Path::new("mem")).unwrap();
            assert_eq!(back, w);
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            dataset: "demo".into(),
            map: "map.bin".into(),
            horizon_s: 4.0,
            seed: Some(3),
            entries: (0..n)
                .map(|i| ManifestEntry {
                    id: format!("t{i:05}"),
                    file: format!("traj/t{i:05}.txt").into(),
                    split: Split::Train,
                })
                .collect(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = split(&manifest(20), [0.6, 0.2, 0.2], 1).unwrap();
        m.seed = None;
        let back = DatasetManifest::parse(&m.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn split_edge_cases() {
        let m = split(&manifest(200), [1.0, 0.0, 0.0], 5).unwrap();
        assert!(m.entries.iter().all(|e| e.split == Split::Train));
        let a = split(&manifest(200), [0.5, 0.25, 0.25], 5).unwrap();
        let b = split(&manifest(200), [0.5, 0.25, 0.25], 5).unwrap();
        assert_eq!(a, b);
        assert!(split(&manifest(2), [0.5, 0.6, -0.1], 5).is_err());
        let no_val = split(&manifest(500), [0.5, 0.0, 0.5], 5).unwrap();
        assert!(no_val.entries.iter().all(|e| e.split != Split::Val));
    }

    #[test]
    fn split_proportions() {
        let m = split(&manifest(10000), [0.8, 0.1, 0.1], 42).unwrap();
        let count = |s| m.entries.iter().filter(|e| e.split == s).count() as f64 / 10000.0;
        assert!((count(Split::Train) - 0.8).abs() < 0.01);
        assert!((count(Split::Val) - 0.1).abs() < 0.01);
        assert!((count(Split::Test) - 0.1).abs() < 0.01);
    }

    #[test]
    fn split_is_stable_when_growing() {
        let small = split(&manifest(300), [0.7, 0.2, 0.1], 9).unwrap();
        let big = split(&manifest(600), [0.7, 0.2, 0.1], 9).unwrap();
        assert_eq!(small.entries[..], big.entries[..300]);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn chunk_windows_have_horizon_length(n in 2usize..200, steps in 1usize..50) {
            let t = random_traj(n as u64, n);
            let c = chunk(&t, steps as f64 * 0.1).unwrap();
            prop_assert_eq!(c.len(), (n - 1) / steps);
            for w in &c {
                prop_assert_eq!(w.len(), steps + 1);
                prop_assert!(w.validate().is_ok());
            }
        }
    }
}
