//! Aggressiveness scoring.
//!
//! A trajectory is summarised by the extremes (max, min) of selected
//! components of its differentiated state. Each extreme gets a Gaussian fit
//! over a reference dataset, and the free energy
//! `E = -T log sum_i exp(log p_i(phi_i) / T)` measures how far the
//! trajectory sits from that data: higher is more out-of-distribution.
//!
//! Differentiated-state layout (per timestep):
//!
//! | index | component |
//! |-------|-----------|
//! | 0..3  | body specific force `a_x, a_y, a_z` |
//! | 3..6  | body angular velocity `w_x, w_y, w_z` |
//! | 6..9  | body velocity `V_x, V_y, V_z` |

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Trajectory, VehicleState};

pub const DIFF_STATE_DIM: usize = 9;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
const MIN_VARIANCE: f64 = 1e-12;
const ENERGY_HEADER: &str = "# terradyn-energy v1";

pub fn differentiated_state(s: &VehicleState) -> [f64; DIFF_STATE_DIM] {
    let a = s.body_acceleration;
    let w = s.body_angular_velocity;
    let v = s.body_velocity;
    [a.x, a.y, a.z, w.x, w.y, w.z, v.x, v.y, v.z]
}

pub fn component_name(index: usize) -> &'static str {
    const NAMES: [&str; DIFF_STATE_DIM] = ["a_x", "a_y", "a_z", "w_x", "w_y", "w_z", "v_x", "v_y", "v_z"];
    NAMES.get(index).copied().unwrap_or("?")
}

/// Which differentiated-state components feed the feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    indices: Vec<usize>,
}

impl FeatureSelection {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::ConfigInvalid("feature selection is empty".into()));
        }
        for (i, k) in indices.iter().enumerate() {
            if *k >= DIFF_STATE_DIM {
                return Err(Error::ConfigInvalid(format!("component index {k} out of range")));
            }
            if indices[..i].contains(k) {
                return Err(Error::ConfigInvalid(format!("component index {k} repeated")));
            }
        }
        Ok(Self { indices })
    }

    /// The three body-acceleration components.
    pub fn acceleration() -> Self {
        Self { indices: vec![0, 1, 2] }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Feature dimension, two per selected component.
    pub fn feature_dim(&self) -> usize {
        2 * self.indices.len()
    }
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self::acceleration()
    }
}

/// `[max_t x[k1], min_t x[k1], max_t x[k2], ...]` over every state.
pub fn features(traj: &Trajectory, sel: &FeatureSelection) -> Result<Vec<f64>> {
    if traj.states.len() < 2 {
        return Err(Error::EmptyTrajectory);
    }
    let mut phi: Vec<f64> = sel
        .indices
        .iter()
        .flat_map(|_| [f64::NEG_INFINITY, f64::INFINITY])
        .collect();
    for s in &traj.states {
        let x = differentiated_state(s);
        for (j, &k) in sel.indices.iter().enumerate() {
            phi[2 * j] = phi[2 * j].max(x[k]);
            phi[2 * j + 1] = phi[2 * j + 1].min(x[k]);
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (std::f64::consts::TAU * self.variance).ln() - d * d / (2.0 * self.variance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub temperature: f64,
    pub selection: FeatureSelection,
    pub gaussians: Vec<Gaussian>,
}

/// Numerically stable `log sum exp`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-T log sum_i exp(l_i / T)` for per-feature log-densities `l_i`.
pub fn free_energy(log_densities: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = log_densities.iter().map(|l| l / temperature).collect();
    -temperature * log_sum_exp(&scaled)
}

impl EnergyModel {
    pub fn new(temperature: f64, selection: FeatureSelection, gaussians: Vec<Gaussian>) -> Result<Self> {
        let m = Self {
            temperature,
            selection,
            gaussians,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::ConfigInvalid("temperature must be positive".into()));
        }
        if self.gaussians.len() != self.selection.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} Gaussians for {} features",
                self.gaussians.len(),
                self.selection.feature_dim()
            )));
        }
        if let Some((i, g)) = self
            .gaussians
            .iter()
            .enumerate()
            .find(|(_, g)| !(g.variance > 0.0) || !g.mean.is_finite() || !g.variance.is_finite())
        {
            return Err(Error::DegenerateFeature {
                index: i,
                variance: g.variance,
            });
        }
        Ok(())
    }

    pub fn energy_of_features(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.gaussians.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} features for {} Gaussians",
                phi.len(),
                self.gaussians.len()
            )));
        }
        let l: Vec<f64> = phi.iter().zip(&self.gaussians).map(|(x, g)| g.log_density(*x)).collect();
        Ok(free_energy(&l, self.temperature))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{ENERGY_HEADER}\ntemperature {:?}\nselection", self.temperature);
        for k in &self.selection.indices {
            let _ = write!(out, " {k}");
        }
        out.push('\n');
        for (i, g) in self.gaussians.iter().enumerate() {
            let _ = writeln!(out, "feature {i} {:?} {:?}", g.mean, g.variance);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == ENERGY_HEADER => {}
            _ => return Err(Error::parse(path, 1, "missing energy model header")),
        }
        let mut temperature = None;
        let mut selection = None;
        let mut gaussians = Vec::new();
        for (n, line) in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::parse(path, n + 1, format!("bad number `{s}`"))) };
            match tokens.as_slice() {
                ["temperature", t] => temperature = Some(num(t)?),
                ["selection", rest @ ..] => {
                    let idx = rest
                        .iter()
                        .map(|s| s.parse().map_err(|_| Error::parse(path, n + 1, "bad component index")))
                        .collect::<Result<Vec<usize>>>()?;
                    selection = Some(FeatureSelection::new(idx)?);
                }
                ["feature", i, mean, var] => {
                    if i.parse::<usize>().ok() != Some(gaussians.len()) {
                        return Err(Error::parse(path, n + 1, "features out of order"));
                    }
                    gaussians.push(Gaussian {
                        mean: num(mean)?,
                        variance: num(var)?,
                    });
                }
                _ => return Err(Error::parse(path, n + 1, "unrecognised line")),
            }
        }
        let temperature = temperature.ok_or_else(|| Error::parse(path, 0, "missing temperature"))?;
        let selection = selection.ok_or_else(|| Error::parse(path, 0, "missing selection"))?;
        Self::new(temperature, selection, gaussians)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Per-feature Gaussians with sample mean and population variance over
/// trajectories.
pub fn fit(dataset: &[Trajectory], sel: &FeatureSelection, temperature: f64) -> Result<EnergyModel> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            got: dataset.len(),
        });
    }
    let phis = dataset
        .iter()
        .map(|t| features(t, sel))
        .collect::<Result<Vec<_>>>()?;
    let n = phis.len() as f64;
    let dim = sel.feature_dim();
    let mut gaussians = Vec::with_capacity(dim);
    for i in 0..dim {
        let mean = phis.iter().map(|p| p[i]).sum::<f64>() / n;
        let variance = phis.iter().map(|p| (p[i] - mean) * (p[i] - mean)).sum::<f64>() / n;
        if variance < MIN_VARIANCE {
            return Err(Error::DegenerateFeature { index: i, variance });
        }
        gaussians.push(Gaussian { mean, variance });
    }
    EnergyModel::new(temperature, sel.clone(), gaussians)
}

pub fn energy(model: &EnergyModel, traj: &Trajectory) -> Result<f64> {
    model.energy_of_features(&features(traj, &model.selection)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentBound {
    pub component: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Box constraints on differentiated-state components.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicLimits {
    pub bounds: Vec<ComponentBound>,
}

impl DynamicLimits {
    pub fn new(bounds: Vec<ComponentBound>) -> Result<Self> {
        for b in &bounds {
            if b.component >= DIFF_STATE_DIM {
                return Err(Error::ConfigInvalid(format!("component {} out of range", b.component)));
            }
            if !(b.lower <= b.upper) {
                return Err(Error::ConfigInvalid(format!(
                    "lower bound {} exceeds upper bound {} on component {}",
                    b.lower, b.upper, b.component
                )));
            }
        }
        Ok(Self { bounds })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub component: usize,
    pub value: f64,
    /// The bound that was crossed.
    pub bound: f64,
}

/// Every (timestep, component) where the trajectory leaves the box, in
/// timestep order then bound order.
pub fn check_limits(traj: &Trajectory, limits: &DynamicLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    for (step, s) in traj.states.iter().enumerate() {
        let x = differentiated_state(s);
        for b in &limits.bounds {
            let value = x[b.component];
            let bound = if value > b.upper {
                b.upper
            } else if value < b.lower {
                b.lower
            } else {
                continue;
            };
            out.push(Violation {
                step,
                component: b.component,
                value,
                bound,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{Quat, Vec3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_from_accels(accels: &[Vec3]) -> Trajectory {
        let states = accels
            .iter()
            .enumerate()
            .map(|(k, a)| VehicleState {
                time: k as f64 * 0.1,
                position: Vec3::zeros(),
                orientation: Quat::identity(),
                body_velocity: Vec3::new(5.0, 0.0, 0.0),
                body_angular_velocity: Vec3::new(0.0, 0.0, 0.1 * k as f64),
                body_acceleration: *a,
            })
            .collect();
        Trajectory::new("t", 0.1, states, vec![Default::default(); accels.len()]).unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let accels: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-5.0..5.0), rng.random_range(5.0..15.0)))
            .collect();
        traj_from_accels(&accels)
    }

    #[test]
    fn constant_component_gives_equal_extremes() {
        let t = traj_from_accels(&[Vec3::new(1.5, 0.0, 9.8); 4]);
        let phi = features(&t, &FeatureSelection::acceleration()).unwrap();
        assert_eq!(&phi[..2], &[1.5, 1.5]);
    }

    #[test]
    fn extremes_of_three_samples() {
        let t = traj_from_accels(&[Vec3::new(-1.0, 0.0, 0.0), Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)]);
        let sel = FeatureSelection::new(vec![0]).unwrap();
        assert_eq!(features(&t, &sel).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn features_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_traj(&mut rng, 41);
        let sel = FeatureSelection::new(vec![2, 0, 5]).unwrap();
        let phi = features(&t, &sel).unwrap();
        for (j, &k) in sel.indices().iter().enumerate() {
            let mut hi = f64::MIN;
            let mut lo = f64::MAX;
            for s in &t.states {
                let v = differentiated_state(s)[k];
                if v > hi {
                    hi = v;
                }
                if v < lo {
                    lo = v;
                }
            }
            assert_eq!(phi[2 * j], hi);
            assert_eq!(phi[2 * j + 1], lo);
        }
    }

    #[test]
    fn selection_validation() {
        assert!(FeatureSelection::new(vec![]).is_err());
        assert!(FeatureSelection::new(vec![1, 1]).is_err());
        assert!(FeatureSelection::new(vec![9]).is_err());
        assert_eq!(FeatureSelection::default().feature_dim(), 6);
    }

    #[test]
    fn two_point_moments() {
        let a = traj_from_accels(&[Vec3::zeros(); 3]);
        let b = traj_from_accels(&[Vec3::new(2.0, 0.0, 0.0); 3]);
        let sel = FeatureSelection::new(vec![0]).unwrap();
        let m = fit(&[a.clone(), b], &sel, 1.0).unwrap();
        assert_eq!(m.gaussians[0], Gaussian { mean: 1.0, variance: 1.0 });
        assert!(matches!(fit(&[a.clone(), a.clone()], &sel, 1.0), Err(Error::DegenerateFeature { .. })));
        assert!(matches!(fit(&[a], &sel, 1.0), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn moments_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Trajectory> = (0..50).map(|_| random_traj(&mut rng, 20)).collect();
        let sel = FeatureSelection::acceleration();
        let m = fit(&data, &sel, 1.0).unwrap();
        for i in 0..6 {
            let xs: Vec<f64> = data.iter().map(|t| features(t, &sel).unwrap()[i]).collect();
            let mut sum = 0.0;
            for x in &xs {
                sum += x;
            }
            let mean = sum / 50.0;
            let mut sq = 0.0;
            for x in &xs {
                sq += x * x;
            }
            let var = sq / 50.0 - mean * mean;
            assert!((m.gaussians[i].mean - mean).abs() < 1e-12);
            assert!((m.gaussians[i].variance - var).abs() < 1e-9);
        }
    }

    fn single(mean: f64, variance: f64, t: f64) -> EnergyModel {
        EnergyModel::new(t, FeatureSelection::new(vec![0]).unwrap(), vec![Gaussian { mean, variance }; 2]).unwrap()
    }

    #[test]
    fn energy_is_zero_at_unit_peak_density() {
        // sigma = 1/sqrt(2 pi) gives a peak density of exactly one
        let var = 1.0 / std::f64::consts::TAU;
        let m = single(3.0, var, 1.0);
        let e = m.energy_of_features(&[3.0, 3.0]).unwrap();
        // two identical terms: E = 0 - log 2
        assert!((e + 2f64.ln()).abs() < 1e-12);
        let one = EnergyModel::new(
            1.0,
            FeatureSelection::new(vec![0]).unwrap(),
            vec![Gaussian { mean: 3.0, variance: var }, Gaussian { mean: 0.0, variance: 1e6 }],
        )
        .unwrap();
        assert!(one.gaussians[0].log_density(3.0).abs() < 1e-12);
    }

    #[test]
    fn energy_grows_away_from_the_mean() {
        let m = single(0.0, 1.0, 1.0);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let x = 0.5 * k as f64;
            let e = m.energy_of_features(&[x, -x]).unwrap();
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn limit_checks() {
        let lim = DynamicLimits::new(vec![ComponentBound {
            component: 2,
            lower: -10.0,
            upper: 10.0,
        }])
        .unwrap();
        let ok = traj_from_accels(&[Vec3::new(0.0, 0.0, 9.8), Vec3::new(0.0, 0.0, 9.0)]);
        assert!(check_limits(&ok, &lim).is_empty());
        let bad = traj_from_accels(&[Vec3::new(0.0, 0.0, 9.8), Vec3::new(0.0, 0.0, 12.0), Vec3::new(0.0, 0.0, 9.0)]);
        let v = check_limits(&bad, &lim);
        assert_eq!(v, vec![Violation { step: 1, component: 2, value: 12.0, bound: 10.0 }]);
        assert!(DynamicLimits::new(vec![ComponentBound { component: 0, lower: 1.0, upper: 0.0 }]).is_err());
    }

    #[test]
    fn limit_report_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_traj(&mut rng, 30);
        let bounds: Vec<ComponentBound> = (0..4)
            .map(|c| {
                let a: f64 = rng.random_range(-4.0..8.0);
                ComponentBound { component: c, lower: a, upper: a + rng.random_range(0.0..6.0) }
            })
            .collect();
        let lim = DynamicLimits::new(bounds.clone()).unwrap();
        let mut want = Vec::new();
        for (step, s) in t.states.iter().enumerate() {
            for b in &bounds {
                let v = differentiated_state(s)[b.component];
                if v > b.upper {
                    want.push(Violation { step, component: b.component, value: v, bound: b.upper });
                } else if v < b.lower {
                    want.push(Violation { step, component: b.component, value: v, bound: b.lower });
                }
            }
        }
        assert_eq!(check_limits(&t, &lim), want);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<Trajectory> = (0..10).map(|_| random_traj(&mut rng, 10)).collect();
        let m = fit(&data, &FeatureSelection::acceleration(), 0.7).unwrap();
        let text = m.to_text();
        let back = EnergyModel::parse(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    proptest! {
        #[test]
        fn single_term_energy_is_negative_log_density(
            mean in -5.0f64..5.0, var in 0.01f64..10.0, x in -20.0f64..20.0, t in 0.05f64..20.0,
        ) {
            let l = Gaussian { mean, variance: var }.log_density(x);
            prop_assert!((free_energy(&[l], t) + l).abs() <= 1e-12 * (1.0 + l.abs()));
        }

        #[test]
        fn duplicated_terms_lower_energy_by_t_log_k(l in -30.0f64..5.0, t in 0.05f64..20.0, k in 1usize..8) {
            let e1 = free_energy(&[l], t);
            let ek = free_energy(&vec![l; k], t);
            prop_assert!((ek - (e1 - t * (k as f64).ln())).abs() < 1e-9 * (1.0 + e1.abs()));
        }

        #[test]
        fn energy_ignores_timestep_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_traj(&mut rng, 15);
            let data: Vec<Trajectory> = (0..8).map(|_| random_traj(&mut rng, 15)).collect();
            let m = fit(&data, &FeatureSelection::acceleration(), 1.0).unwrap();
            let mut accels: Vec<Vec3> = t.states.iter().map(|s| s.body_acceleration).collect();
            accels.reverse();
            accels.rotate_left(seed as usize % 15);
            let shuffled = traj_from_accels(&accels);
            prop_assert_eq!(energy(&m, &t).unwrap(), energy(&m, &shuffled).unwrap());
        }

        #[test]
        fn features_of_halves_combine(seed in 0u64..1000, cut in 2usize..28) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_traj(&mut rng, 30);
            let sel = FeatureSelection::new(vec![0, 1, 2, 5]).unwrap();
            let whole = features(&t, &sel).unwrap();
            let mut a = t.clone();
            a.states.truncate(cut);
            a.controls.truncate(cut);
            let mut b = t.clone();
            b.states.drain(..cut - 1);
            b.controls.drain(..cut - 1);
            let fa = features(&a, &sel).unwrap();
            let fb = features(&b, &sel).unwrap();
            for j in 0..sel.indices().len() {
                prop_assert_eq!(whole[2 * j], fa[2 * j].max(fb[2 * j]));
                prop_assert_eq!(whole[2 * j + 1], fa[2 * j + 1].min(fb[2 * j + 1]));
            }
        }
    }
}
