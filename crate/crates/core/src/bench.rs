//! Benchmark harness: horizon max normed error (H-MNE) per state group,
//! per-model aggregation, and the cubic energy-vs-error trend.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};

use crate::energy::{energy, EnergyModel};
use crate::error::{Error, Result};
use crate::learn::MlpWeights;
use crate::models::{Dynamics, ModelKind};
use crate::rollout::{rollout_batch, RolloutConfig};
use crate::rotation::{wrap_angle, Vec3};
use crate::terrain::ElevationMap;
use crate::types::{Trajectory, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateGroup {
    Acceleration,
    AngularVelocity,
    Velocity,
    Position,
    Roll,
    Pitch,
    Yaw,
}

pub const GROUP_COUNT: usize = 7;

impl StateGroup {
    /// Report column order.
    pub const ALL: [StateGroup; GROUP_COUNT] = [
        StateGroup::Acceleration,
        StateGroup::AngularVelocity,
        StateGroup::Velocity,
        StateGroup::Position,
        StateGroup::Roll,
        StateGroup::Pitch,
        StateGroup::Yaw,
    ];

    pub fn key(self) -> &'static str {
        match self {
            StateGroup::Acceleration => "accel",
            StateGroup::AngularVelocity => "ang_vel",
            StateGroup::Velocity => "velocity",
            StateGroup::Position => "position",
            StateGroup::Roll => "roll",
            StateGroup::Pitch => "pitch",
            StateGroup::Yaw => "yaw",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            StateGroup::Acceleration => "Accel.",
            StateGroup::AngularVelocity => "Ang. Vel.",
            StateGroup::Velocity => "Velocity",
            StateGroup::Position => "Position",
            StateGroup::Roll => "Roll",
            StateGroup::Pitch => "Pitch",
            StateGroup::Yaw => "Yaw",
        }
    }

    pub fn is_angle(self) -> bool {
        matches!(self, StateGroup::Roll | StateGroup::Pitch | StateGroup::Yaw)
    }

    fn vector(self, s: &VehicleState) -> Vec3 {
        match self {
            StateGroup::Acceleration => s.body_acceleration,
            StateGroup::AngularVelocity => s.body_angular_velocity,
            StateGroup::Velocity => s.body_velocity,
            StateGroup::Position => s.position,
            _ => unreachable!("angle group"),
        }
    }

    fn angle(self, s: &VehicleState) -> f64 {
        let e = s.euler();
        match self {
            StateGroup::Roll => e.roll,
            StateGroup::Pitch => e.pitch,
            StateGroup::Yaw => e.yaw,
            _ => unreachable!("vector group"),
        }
    }

    /// Error magnitude between two states for this group.
    pub fn error(self, pred: &VehicleState, gt: &VehicleState) -> f64 {
        if self.is_angle() {
            wrap_angle(self.angle(pred) - self.angle(gt)).abs()
        } else {
            (self.vector(pred) - self.vector(gt)).norm()
        }
    }
}

impl fmt::Display for StateGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StateGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StateGroup::ALL
            .into_iter()
            .find(|g| g.key() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown state group `{s}`")))
    }
}

pub fn hmne(pred: &Trajectory, gt: &Trajectory, group: StateGroup) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.dt != gt.dt {
        return Err(Error::InvalidTrajectory(format!("dt {} vs {}", pred.dt, gt.dt)));
    }
    Ok(pred
        .states
        .iter()
        .zip(&gt.states)
        .map(|(p, g)| group.error(p, g))
        .fold(0.0, f64::max))
}

pub fn hmne_all(pred: &Trajectory, gt: &Trajectory) -> Result<[f64; GROUP_COUNT]> {
    let mut out = [0.0; GROUP_COUNT];
    for (o, g) in out.iter_mut().zip(StateGroup::ALL) {
        *o = hmne(pred, gt, g)?;
    }
    Ok(out)
}

/// Mean and population standard deviation over trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Cell {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Cell {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }

    pub fn render(&self) -> String {
        if self.count == 0 {
            "n/a".to_string()
        } else {
            format!("{:.2} ± {:.2}", self.mean, self.std)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScore {
    pub id: String,
    pub hmne: [f64; GROUP_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub model: ModelKind,
    pub cells: [Cell; GROUP_COUNT],
    /// Per-trajectory values behind the cells, in dataset order. Empty when
    /// the report was read back from CSV.
    pub scores: Vec<TrajectoryScore>,
}

impl ModelRow {
    pub fn cell(&self, group: StateGroup) -> Cell {
        self.cells[group as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excluded {
    pub model: ModelKind,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub trajectory_count: usize,
    pub rows: Vec<ModelRow>,
    pub excluded: Vec<Excluded>,
}

impl BenchmarkReport {
    pub fn row(&self, model: ModelKind) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn cell(&self, model: ModelKind, group: StateGroup) -> Option<Cell> {
        self.row(model).map(|r| r.cell(group))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub rollout: RolloutConfig,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            jobs: 1,
        }
    }
}

/// Rolls every model out over every trajectory and aggregates H-MNE.
pub fn evaluate(
    dataset_id: &str,
    models: &[ModelKind],
    dataset: &[Trajectory],
    map: &ElevationMap,
    params: &VehicleParams,
    weights: Option<&MlpWeights>,
    opts: &EvalOptions,
) -> Result<BenchmarkReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dynamics = models
        .iter()
        .map(|&k| Dynamics::new(k, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(models.len());
    let mut excluded = Vec::new();
    for model in &dynamics {
        let results = rollout_batch(model, dataset, map, params, &opts.rollout, opts.jobs);
        let mut scores = Vec::with_capacity(dataset.len());
        for (gt, res) in dataset.iter().zip(results) {
            match res.and_then(|r| hmne_all(&r.predicted, gt)) {
                Ok(h) => scores.push(TrajectoryScore {
                    id: gt.id.clone(),
                    hmne: h,
                }),
                Err(e) => excluded.push(Excluded {
                    model: model.kind(),
                    id: gt.id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let mut cells = [Cell::from_values(&[]); GROUP_COUNT];
        for (g, cell) in cells.iter_mut().enumerate() {
            let values: Vec<f64> = scores.iter().map(|s| s.hmne[g]).collect();
            *cell = Cell::from_values(&values);
        }
        rows.push(ModelRow {
            model: model.kind(),
            cells,
            scores,
        });
    }
    Ok(BenchmarkReport {
        dataset: dataset_id.to_string(),
        trajectory_count: dataset.len(),
        rows,
        excluded,
    })
}

/// Fixed-width text table, one row per model, columns in [`StateGroup::ALL`]
/// order.
pub fn render_report(report: &BenchmarkReport) -> String {
    const MODEL_W: usize = 10;
    const CELL_W: usize = 16;
    let mut out = String::new();
    let _ = writeln!(out, "dataset: {} ({} trajectories)", report.dataset, report.trajectory_count);
    let _ = write!(out, "{:<MODEL_W$}", "Model");
    for g in StateGroup::ALL {
        let _ = write!(out, " {:>CELL_W$}", g.title());
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{:<MODEL_W$}", row.model.name());
        for c in &row.cells {
            let _ = write!(out, " {:>CELL_W$}", c.render());
        }
        out.push('\n');
    }
    if !report.excluded.is_empty() {
        let _ = writeln!(out, "excluded:");
        for e in &report.excluded {
            let _ = writeln!(out, "  {} {}: {}", e.model, e.id, e.reason);
        }
    }
    out
}

const CSV_HEADER: &str = "dataset,model,group,mean,std,count";

/// Long-format CSV, one line per cell. Excluded trajectories follow as
/// `#` comment lines.
pub fn report_to_csv(report: &BenchmarkReport) -> String {
    let mut out = format!("# trajectories {}\n{CSV_HEADER}\n", report.trajectory_count);
    for row in &report.rows {
        for (g, c) in StateGroup::ALL.iter().zip(&row.cells) {
            let _ = writeln!(out, "{},{},{},{:?},{:?},{}", report.dataset, row.model, g, c.mean, c.std, c.count);
        }
    }
    for e in &report.excluded {
        let _ = writeln!(out, "# excluded {} {} {}", e.model, e.id, e.reason.replace('\n', " "));
    }
    out
}

pub fn report_from_csv(text: &str, path: &Path) -> Result<BenchmarkReport> {
    let mut report = BenchmarkReport {
        dataset: String::new(),
        trajectory_count: 0,
        rows: Vec::new(),
        excluded: Vec::new(),
    };
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if let Some(rest) = line.strip_prefix("# trajectories ") {
            report.trajectory_count = rest.trim().parse().map_err(|_| Error::parse(path, ln, "bad trajectory count"))?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("# excluded ") {
            let mut it = rest.splitn(3, ' ');
            let (Some(m), Some(id)) = (it.next(), it.next()) else {
                return Err(Error::parse(path, ln, "bad excluded line"));
            };
            report.excluded.push(Excluded {
                model: m.parse()?,
                id: id.to_string(),
                reason: it.next().unwrap_or("").to_string(),
            });
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if line == CSV_HEADER {
            seen_header = true;
            continue;
        }
        if !seen_header {
            return Err(Error::parse(path, ln, "missing CSV header"));
        }
        let f: Vec<&str> = line.split(',').collect();
        let [dataset, model, group, mean, std, count] = f.as_slice() else {
            return Err(Error::parse(path, ln, "expected 6 fields"));
        };
        let model: ModelKind = model.parse()?;
        let group: StateGroup = group.parse()?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(path, ln, format!("bad number `{s}`")));
        let cell = Cell {
            mean: num(mean)?,
            std: num(std)?,
            count: count.parse().map_err(|_| Error::parse(path, ln, "bad count"))?,
        };
        report.dataset = dataset.to_string();
        if report.rows.last().map(|r| r.model) != Some(model) {
            report.rows.push(ModelRow {
                model,
                cells: [Cell::from_values(&[]); GROUP_COUNT],
                scores: Vec::new(),
            });
        }
        report.rows.last_mut().expect("row pushed").cells[group as usize] = cell;
    }
    if !seen_header {
        return Err(Error::parse(path, 1, "missing CSV header"));
    }
    Ok(report)
}

/// One scatter row: a trajectory's energy and its per-group H-MNE.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub id: String,
    pub model: ModelKind,
    pub energy: f64,
    pub hmne: [f64; GROUP_COUNT],
}

pub fn scatter(report: &BenchmarkReport, model: &EnergyModel, dataset: &[Trajectory]) -> Result<Vec<ScatterPoint>> {
    let mut out = Vec::new();
    for row in &report.rows {
        for s in &row.scores {
            let gt = dataset
                .iter()
                .find(|t| t.id == s.id)
                .ok_or_else(|| Error::InvalidTrajectory(format!("no trajectory `{}` in dataset", s.id)))?;
            out.push(ScatterPoint {
                id: s.id.clone(),
                model: row.model,
                energy: energy(model, gt)?,
                hmne: s.hmne,
            });
        }
    }
    Ok(out)
}

pub fn scatter_to_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("id,model,energy");
    for g in StateGroup::ALL {
        let _ = write!(out, ",{g}");
    }
    out.push('\n');
    for p in points {
        let _ = write!(out, "{},{},{:?}", p.id, p.model, p.energy);
        for h in &p.hmne {
            let _ = write!(out, ",{h:?}");
        }
        out.push('\n');
    }
    out
}

pub fn scatter_from_csv(text: &str, path: &Path) -> Result<Vec<ScatterPoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.starts_with("id,model,energy") => {}
        _ => return Err(Error::parse(path, 1, "missing scatter header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 + GROUP_COUNT {
            return Err(Error::parse(path, n + 1, format!("expected {} fields", 3 + GROUP_COUNT)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(path, n + 1, format!("bad number `{s}`")));
        let mut hmne = [0.0; GROUP_COUNT];
        for (h, s) in hmne.iter_mut().zip(&f[3..]) {
            *h = num(s)?;
        }
        out.push(ScatterPoint {
            id: f[0].to_string(),
            model: f[1].parse()?,
            energy: num(f[2])?,
            hmne,
        });
    }
    Ok(out)
}

/// Cubic least-squares fit of H-MNE against energy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendFit {
    /// `c[0] + c[1] x + c[2] x^2 + c[3] x^3`
    pub coefficients: [f64; 4],
    pub points: Vec<(f64, f64)>,
}

impl TrendFit {
    pub fn eval(&self, x: f64) -> f64 {
        let c = &self.coefficients;
        ((c[3] * x + c[2]) * x + c[1]) * x + c[0]
    }

    pub fn residual_norm(&self) -> f64 {
        self.points.iter().map(|(x, y)| (self.eval(*x) - y).powi(2)).sum::<f64>().sqrt()
    }
}

pub fn trend(points: &[(f64, f64)]) -> Result<TrendFit> {
    if points.len() < 4 {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: points.len(),
        });
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::SingularFit("non-finite point".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 4 {
        return Err(Error::SingularFit(format!("{} distinct abscissae, need 4", xs.len())));
    }
    let n = points.len() as f64;
    let center = points.iter().map(|p| p.0).sum::<f64>() / n;
    let scale = points.iter().map(|p| (p.0 - center).abs()).fold(0.0, f64::max);
    let mut ata = Matrix4::<f64>::zeros();
    let mut aty = Vector4::<f64>::zeros();
    for (x, y) in points {
        let u = (x - center) / scale;
        let row = Vector4::new(1.0, u, u * u, u * u * u);
        ata += row * row.transpose();
        aty += row * *y;
    }
    let b = ata
        .cholesky()
        .map(|c| c.solve(&aty))
        .ok_or_else(|| Error::SingularFit("normal equations not positive definite".into()))?;
    // expand sum_k b_k ((x - c) / s)^k in powers of x
    const BINOM: [[f64; 4]; 4] = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    let mut coefficients = [0.0; 4];
    for k in 0..4 {
        let bk = b[k] / scale.powi(k as i32);
        for (j, c) in coefficients.iter_mut().enumerate().take(k + 1) {
            *c += bk * BINOM[k][j] * (-center).powi((k - j) as i32);
        }
    }
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularFit("non-finite coefficients".into()));
    }
    Ok(TrendFit {
        coefficients,
        points: points.to_vec(),
    })
}

pub fn trend_to_text(fits: &[(ModelKind, StateGroup, TrendFit)]) -> String {
    let mut out = String::from("model,group,c0,c1,c2,c3,points,residual_norm\n");
    for (m, g, f) in fits {
        let c = f.coefficients;
        let _ = writeln!(
            out,
            "{m},{g},{:?},{:?},{:?},{:?},{},{:?}",
            c[0],
            c[1],
            c[2],
            c[3],
            f.points.len(),
            f.residual_norm()
        );
    }
    out
}
