//! Small tanh multilayer perceptron with hand-written backpropagation, the
//! single-step training loop for the learned dynamics model, and its
//! weight file format.
//!
//! Feature layout (version 1), in order:
//! `[V_x, V_y, V_z, w_x, w_y, w_z, roll, pitch, patch[0..size*size], steering, wheel_speed]`.
//! Targets are `[dV_x, dV_y, dV_z, dw_x, dw_y, dw_z]` over one step.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::terrain::{ElevationMap, TerrainPatch};
use crate::types::{ControlInput, Trajectory, VehicleState};

pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const OUTPUT_DIM: usize = 6;
/// Features besides the flattened patch.
pub const STATE_FEATURES: usize = 10;

const WEIGHTS_MAGIC: &[u8; 8] = b"TDYNMLP\0";
const WEIGHTS_VERSION: u32 = 1;
const MIN_STD: f64 = 1e-9;

pub fn feature_dim(patch_size: usize) -> usize {
    STATE_FEATURES + patch_size * patch_size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense layer `y = act(W x + b)`, `W` row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(match self.activation {
                Activation::Tanh => acc.tanh(),
                Activation::Identity => acc,
            });
        }
    }
}

/// Per-component affine normalisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over `rows`; near-constant columns get unit std.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
            n += 1;
        }
        let nf = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > MIN_STD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Patch geometry the network was trained with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub size: usize,
    pub resolution: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: 15,
            resolution: 0.5,
        }
    }
}

/// A trained (or hand-built) network plus the statistics needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
    pub input_stats: Standardization,
    pub target_stats: Standardization,
    pub patch: PatchSpec,
}

impl MlpWeights {
    /// Network of the given shape with every weight and bias zero and
    /// identity normalisation.
    pub fn zeros(patch: PatchSpec, hidden: &[usize]) -> Self {
        let input = feature_dim(patch.size);
        let layers = layer_shapes(input, hidden, OUTPUT_DIM)
            .map(|(i, o, a)| Layer::zeros(i, o, a))
            .collect();
        Self {
            layers,
            input_stats: Standardization::identity(input),
            target_stats: Standardization::identity(OUTPUT_DIM),
            patch,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::ShapeMismatch(format!("layer {i} buffers do not match its shape")));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("layer {i} has non-finite parameters")));
            }
        }
        if self.input_stats.dim() != self.input_dim() || self.target_stats.dim() != self.output_dim() {
            return Err(Error::ShapeMismatch("normalisation statistics do not match the network".into()));
        }
        let stds = self.input_stats.std.iter().chain(&self.target_stats.std);
        if !stds.clone().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::ShapeMismatch("normalisation std must be positive".into()));
        }
        Ok(())
    }

    /// Forward pass followed by target de-standardisation.
    pub fn predict_delta(&self, features: &[f64]) -> Result<Vec<f64>> {
        let z = forward(self, features)?;
        Ok(self.target_stats.invert(&z))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&FEATURE_LAYOUT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.patch.size as u32).to_le_bytes());
        out.extend_from_slice(&self.patch.resolution.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(l.activation.tag());
        }
        for stats in [&self.input_stats, &self.target_stats] {
            out.extend_from_slice(&(stats.dim() as u32).to_le_bytes());
            for v in stats.mean.iter().chain(&stats.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(weights_err("bad magic"));
        }
        if r.u32()? != WEIGHTS_VERSION {
            return Err(weights_err("unsupported version"));
        }
        if r.u32()? != FEATURE_LAYOUT_VERSION {
            return Err(weights_err("unsupported feature layout"));
        }
        let patch = PatchSpec {
            size: r.u32()? as usize,
            resolution: r.f64()?,
        };
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = r.u32()? as usize;
            let o = r.u32()? as usize;
            let a = Activation::from_tag(r.take(1)?[0]).ok_or_else(|| weights_err("bad activation tag"))?;
            shapes.push((i, o, a));
        }
        let mut stats = Vec::with_capacity(2);
        for _ in 0..2 {
            let d = r.u32()? as usize;
            let mean = r.f64s(d)?;
            let std = r.f64s(d)?;
            stats.push(Standardization { mean, std });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, o, a) in shapes {
            let weights = r.f64s(i * o)?;
            let bias = r.f64s(o)?;
            layers.push(Layer {
                inputs: i,
                outputs: o,
                weights,
                bias,
                activation: a,
            });
        }
        if r.pos != bytes.len() {
            return Err(weights_err("trailing bytes"));
        }
        let target_stats = stats.pop().unwrap();
        let input_stats = stats.pop().unwrap();
        let w = Self {
            layers,
            input_stats,
            target_stats,
            patch,
        };
        w.validate()?;
        if w.input_dim() != feature_dim(patch.size) {
            return Err(Error::ShapeMismatch("input layer does not match the patch size".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn weights_err(msg: &str) -> Error {
    Error::Format {
        what: "weight file",
        msg: msg.to_string(),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| weights_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn layer_shapes(input: usize, hidden: &[usize], output: usize) -> impl Iterator<Item = (usize, usize, Activation)> + '_ {
    let dims: Vec<usize> = std::iter::once(input).chain(hidden.iter().copied()).chain([output]).collect();
    let n = dims.len() - 1;
    (0..n).map(move |i| {
        let act = if i + 1 == n { Activation::Identity } else { Activation::Tanh };
        (dims[i], dims[i + 1], act)
    })
}

/// Raw (unnormalised) feature vector in layout order.
pub fn raw_features(state: &VehicleState, u: &ControlInput, patch: &TerrainPatch) -> Vec<f64> {
    let e = state.euler();
    let mut f = Vec::with_capacity(feature_dim(patch.size));
    f.extend(state.body_velocity.iter());
    f.extend(state.body_angular_velocity.iter());
    f.push(e.roll);
    f.push(e.pitch);
    f.extend(&patch.heights);
    f.push(u.steering);
    f.push(u.wheel_speed);
    f
}

/// Standardised feature vector in layout order.
pub fn featurize(
    state: &VehicleState,
    u: &ControlInput,
    patch: &TerrainPatch,
    stats: &Standardization,
) -> Result<Vec<f64>> {
    let dim = feature_dim(patch.size);
    if patch.heights.len() != patch.size * patch.size {
        return Err(Error::ShapeMismatch("patch buffer does not match its size".into()));
    }
    if stats.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "statistics cover {} features, patch of size {} needs {dim}",
            stats.dim(),
            patch.size
        )));
    }
    Ok(stats.apply(&raw_features(state, u, patch)))
}

/// Single-step training pairs from consecutive ground-truth states: raw
/// features at step `k`, velocity and angular-velocity change to `k + 1`.
pub fn transition_samples(dataset: &[Trajectory], map: &ElevationMap, patch: PatchSpec) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for t in dataset {
        for k in 0..t.len() - 1 {
            let (s, next) = (&t.states[k], &t.states[k + 1]);
            let p = map.extract_patch(s.position.xy(), s.euler().yaw, patch.size, patch.resolution)?;
            let dv = next.body_velocity - s.body_velocity;
            let dw = next.body_angular_velocity - s.body_angular_velocity;
            out.push(Sample {
                features: raw_features(s, &t.controls[k], &p),
                target: vec![dv.x, dv.y, dv.z, dw.x, dw.y, dw.z],
            });
        }
    }
    Ok(out)
}

fn check_input(weights: &MlpWeights, features: &[f64]) -> Result<()> {
    if features.len() != weights.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network takes {} features, got {}",
            weights.input_dim(),
            features.len()
        )));
    }
    Ok(())
}

/// Raw network output for already-standardised features.
pub fn forward(weights: &MlpWeights, features: &[f64]) -> Result<Vec<f64>> {
    check_input(weights, features)?;
    let mut cur = features.to_vec();
    let mut next = Vec::new();
    for l in &weights.layers {
        l.apply(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(w: &MlpWeights) -> Self {
        Self {
            weights: w.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: w.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|g| g.fill(0.0));
    }

    fn scale(&mut self, k: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|g| g.iter_mut().for_each(|v| *v *= k));
    }
}

/// Mean squared error over the outputs and its exact gradient.
pub fn backward(weights: &MlpWeights, features: &[f64], target: &[f64]) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(weights);
    let mut scratch = Scratch::default();
    let loss = accumulate(weights, features, target, &mut grads, &mut scratch)?;
    Ok((loss, grads))
}

#[derive(Default)]
struct Scratch {
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Adds this sample's gradient into `grads`; returns its loss.
fn accumulate(
    weights: &MlpWeights,
    features: &[f64],
    target: &[f64],
    grads: &mut Gradients,
    s: &mut Scratch,
) -> Result<f64> {
    check_input(weights, features)?;
    if target.len() != weights.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network emits {} values, target has {}",
            weights.output_dim(),
            target.len()
        )));
    }
    let n_layers = weights.layers.len();
    s.activations.resize_with(n_layers + 1, Vec::new);
    s.activations[0].clear();
    s.activations[0].extend_from_slice(features);
    for (i, l) in weights.layers.iter().enumerate() {
        let (head, tail) = s.activations.split_at_mut(i + 1);
        l.apply(&head[i], &mut tail[0]);
    }
    let out = &s.activations[n_layers];
    let n_out = out.len() as f64;
    let mut loss = 0.0;
    s.delta.clear();
    for (y, t) in out.iter().zip(target) {
        let e = y - t;
        loss += e * e;
        s.delta.push(2.0 * e / n_out);
    }
    loss /= n_out;

    for (i, l) in weights.layers.iter().enumerate().rev() {
        // delta holds dL/d(output of layer i); fold in the activation
        if l.activation == Activation::Tanh {
            for (d, y) in s.delta.iter_mut().zip(&s.activations[i + 1]) {
                *d *= 1.0 - y * y;
            }
        }
        let input = &s.activations[i];
        let gw = &mut grads.weights[i];
        let gb = &mut grads.bias[i];
        for (o, d) in s.delta.iter().enumerate() {
            gb[o] += d;
            let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if i > 0 {
            s.delta_prev.clear();
            s.delta_prev.resize(l.inputs, 0.0);
            for (o, d) in s.delta.iter().enumerate() {
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                for (p, w) in s.delta_prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            std::mem::swap(&mut s.delta, &mut s.delta_prev);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Plain mini-batch gradient descent.
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) constants.
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            hidden: vec![64, 64],
            validation_fraction: 0.2,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::ConfigInvalid("epochs and batch size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::ConfigInvalid("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One raw training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Losses of the freshly initialised network.
    pub initial: EpochLoss,
    pub epochs: Vec<EpochLoss>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl TrainHistory {
    pub fn to_report(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tvalidation_loss\n");
        let _ = writeln!(out, "0\t{:?}\t{:?}", self.initial.train, self.initial.validation);
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(out, "{}\t{:?}\t{:?}", i + 1, e.train, e.validation);
        }
        out
    }
}

/// Fits a network to raw `(features, target)` pairs. Normalisation
/// statistics come from the training split only; losses are reported in
/// normalised target units.
pub fn train(dataset: &[Sample], cfg: &TrainConfig, patch: PatchSpec) -> Result<(MlpWeights, TrainHistory)> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let (d_in, d_out) = (first.features.len(), first.target.len());
    if let Some(i) = dataset
        .iter()
        .position(|s| s.features.len() != d_in || s.target.len() != d_out)
    {
        return Err(Error::ShapeMismatch(format!("sample {i} has inconsistent dimensions")));
    }
    if d_in != feature_dim(patch.size) {
        return Err(Error::ShapeMismatch(format!(
            "samples have {d_in} features, patch size {} needs {}",
            patch.size,
            feature_dim(patch.size)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let (train_idx, val_idx) = if dataset.len() == 1 {
        (order.clone(), order)
    } else {
        let n_val = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, dataset.len() - 1);
        let (v, t) = order.split_at(n_val);
        (t.to_vec(), v.to_vec())
    };

    let input_stats = Standardization::fit(train_idx.iter().map(|&i| dataset[i].features.as_slice()), d_in);
    let target_stats = Standardization::fit(train_idx.iter().map(|&i| dataset[i].target.as_slice()), d_out);
    let norm: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .iter()
        .map(|s| (input_stats.apply(&s.features), target_stats.apply(&s.target)))
        .collect();

    // Xavier-uniform hidden layers; the output layer starts at zero so the
    // untrained network predicts the mean training target.
    let mut layers = Vec::new();
    for (i, o, a) in layer_shapes(d_in, &cfg.hidden, d_out) {
        let limit = (6.0 / (i + o) as f64).sqrt();
        let weights = match a {
            Activation::Identity => vec![0.0; i * o],
            Activation::Tanh => (0..i * o).map(|_| rng.random_range(-limit..limit)).collect(),
        };
        layers.push(Layer {
            inputs: i,
            outputs: o,
            weights,
            bias: vec![0.0; o],
            activation: a,
        });
    }
    let mut net = MlpWeights {
        layers,
        input_stats,
        target_stats,
        patch,
    };

    let eval = |net: &MlpWeights, idx: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &i in idx {
            let y = forward(net, &norm[i].0)?;
            total += y.iter().zip(&norm[i].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        }
        Ok(total / idx.len() as f64)
    };

    let initial = EpochLoss {
        train: eval(&net, &train_idx)?,
        validation: eval(&net, &val_idx)?,
    };
    let mut opt = OptimizerState::new(cfg, &net);
    let mut grads = Gradients::zeros_like(&net);
    let mut scratch = Scratch::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batch_order = train_idx.clone();
    for _ in 0..cfg.epochs {
        batch_order.shuffle(&mut rng);
        for batch in batch_order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                accumulate(&net, &norm[i].0, &norm[i].1, &mut grads, &mut scratch)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grads);
        }
        epochs.push(EpochLoss {
            train: eval(&net, &train_idx)?,
            validation: eval(&net, &val_idx)?,
        });
    }
    let history = TrainHistory {
        initial,
        epochs,
        train_indices: train_idx,
        validation_indices: val_idx,
    };
    Ok((net, history))
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, net: &MlpWeights) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    fn step(&mut self, net: &mut MlpWeights, g: &Gradients) {
        self.t += 1;
        let (c1, c2) = (
            1.0 - Self::BETA1.powi(self.t),
            1.0 - Self::BETA2.powi(self.t),
        );
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let params = [
                (&mut layer.weights, &g.weights[i], &mut self.m.weights[i], &mut self.v.weights[i]),
                (&mut layer.bias, &g.bias[i], &mut self.m.bias[i], &mut self.v.bias[i]),
            ];
            for (p, g, m, v) in params {
                match self.kind {
                    Optimizer::Sgd => {
                        for (p, g) in p.iter_mut().zip(g) {
                            *p -= self.lr * g;
                        }
                    }
                    Optimizer::Adam => {
                        for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{Quat, Vec3};

    fn tiny(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> MlpWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Layer> = layer_shapes(inputs, hidden, outputs)
            .map(|(i, o, a)| Layer {
                inputs: i,
                outputs: o,
                weights: (0..i * o).map(|_| rng.random_range(-0.8..0.8)).collect(),
                bias: (0..o).map(|_| rng.random_range(-0.5..0.5)).collect(),
                activation: a,
            })
            .collect();
        MlpWeights {
            layers,
            input_stats: Standardization::identity(inputs),
            target_stats: Standardization::identity(outputs),
            patch: PatchSpec { size: 1, resolution: 1.0 },
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let w = MlpWeights::zeros(PatchSpec { size: 3, resolution: 0.5 }, &[8, 8]);
        let x: Vec<f64> = (0..w.input_dim()).map(|i| i as f64 - 3.0).collect();
        assert_eq!(forward(&w, &x).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn linear_layer_selects_inputs() {
        let mut l = Layer::zeros(8, 6, Activation::Identity);
        for k in 0..6 {
            l.weights[k * 8 + k] = 1.0;
        }
        let w = MlpWeights {
            layers: vec![l],
            input_stats: Standardization::identity(8),
            target_stats: Standardization::identity(6),
            patch: PatchSpec { size: 1, resolution: 1.0 },
        };
        let x = [1.0, -2.0, 3.0, 0.5, 0.25, -7.0, 9.0, 10.0];
        assert_eq!(forward(&w, &x).unwrap(), x[..6].to_vec());
    }

    #[test]
    fn two_layer_hand_computation() {
        // 2 -> 2 (tanh) -> 1
        let w = MlpWeights {
            layers: vec![
                Layer {
                    inputs: 2,
                    outputs: 2,
                    weights: vec![0.1, -0.2, 0.3, 0.4],
                    bias: vec![0.05, -0.1],
                    activation: Activation::Tanh,
                },
                Layer {
                    inputs: 2,
                    outputs: 1,
                    weights: vec![0.7, -0.5],
                    bias: vec![0.2],
                    activation: Activation::Identity,
                },
            ],
            input_stats: Standardization::identity(2),
            target_stats: Standardization::identity(1),
            patch: PatchSpec { size: 1, resolution: 1.0 },
        };
        let x = [1.0, 2.0];
        let h1 = (0.1 * 1.0 - 0.2 * 2.0 + 0.05f64).tanh();
        let h2 = (0.3 * 1.0 + 0.4 * 2.0 - 0.1f64).tanh();
        let y = 0.7 * h1 - 0.5 * h2 + 0.2;
        assert!((forward(&w, &x).unwrap()[0] - y).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = tiny(3, &[4], 2, 1);
        assert!(matches!(forward(&w, &[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(backward(&w, &[1.0, 2.0, 3.0], &[1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let w = tiny(3, &[4], 2, 9);
        let x = [0.3, -0.1, 0.8];
        let y = forward(&w, &x).unwrap();
        let (loss, g) = backward(&w, &x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.weights.iter().chain(&g.bias).flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        let w = MlpWeights {
            layers: vec![Layer {
                inputs: 1,
                outputs: 1,
                weights: vec![1.5],
                bias: vec![-0.25],
                activation: Activation::Identity,
            }],
            input_stats: Standardization::identity(1),
            target_stats: Standardization::identity(1),
            patch: PatchSpec { size: 1, resolution: 1.0 },
        };
        let (x, t) = (2.0, 0.4);
        let (loss, g) = backward(&w, &[x], &[t]).unwrap();
        let r = 1.5 * x - 0.25 - t;
        assert!((loss - r * r).abs() < 1e-15);
        assert!((g.weights[0][0] - 2.0 * r * x).abs() < 1e-15);
        assert!((g.bias[0][0] - 2.0 * r).abs() < 1e-15);
    }

    #[test]
    fn featurize_layout_and_slots() {
        let patch = TerrainPatch {
            size: 3,
            resolution: 0.5,
            heading: 0.0,
            heights: (0..9).map(|i| i as f64 * 0.1 - 0.4).collect(),
        };
        let state = VehicleState {
            time: 0.0,
            position: Vec3::zeros(),
            orientation: crate::rotation::quat_from_euler(&crate::rotation::EulerAngles::new(0.05, -0.1, 1.0)),
            body_velocity: Vec3::new(7.0, 0.3, 0.0),
            body_angular_velocity: Vec3::new(0.01, -0.02, 0.4),
            body_acceleration: Vec3::zeros(),
        };
        let u = ControlInput::new(0.2, 7.5);
        let f = featurize(&state, &u, &patch, &Standardization::identity(19)).unwrap();
        let mut want = vec![7.0, 0.3, 0.0, 0.01, -0.02, 0.4];
        let e = state.euler();
        want.extend([e.roll, e.pitch]);
        want.extend(&patch.heights);
        want.extend([0.2, 7.5]);
        assert_eq!(f, want);
        assert!((e.roll - 0.05).abs() < 1e-12 && (e.pitch + 0.1).abs() < 1e-12);

        let g = featurize(&state, &ControlInput::new(0.2, 9.0), &patch, &Standardization::identity(19)).unwrap();
        let differing: Vec<usize> = (0..19).filter(|&i| f[i] != g[i]).collect();
        assert_eq!(differing, vec![18]);

        let rest = VehicleState {
            orientation: Quat::identity(),
            body_velocity: Vec3::zeros(),
            body_angular_velocity: Vec3::zeros(),
            ..state
        };
        let flat = TerrainPatch { heights: vec![0.0; 9], ..patch.clone() };
        let stats = Standardization {
            mean: (0..19).map(|i| i as f64).collect(),
            std: vec![2.0; 19],
        };
        let f = featurize(&rest, &ControlInput::default(), &flat, &stats).unwrap();
        for (i, v) in f.iter().enumerate() {
            assert_eq!(*v, -(i as f64) / 2.0);
        }
        assert!(featurize(&rest, &ControlInput::default(), &flat, &Standardization::identity(5)).is_err());
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let mut w = MlpWeights::zeros(PatchSpec { size: 3, resolution: 0.25 }, &[5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in &mut w.layers {
            l.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            l.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        w.input_stats.mean[3] = 0.1;
        w.target_stats.std[2] = 3.5;
        let bytes = w.to_bytes();
        let back = MlpWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert!(MlpWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn sample_set(n: usize, seed: u64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let features: Vec<f64> = (0..feature_dim(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
                let target = f(&features);
                Sample { features, target }
            })
            .collect()
    }

    #[test]
    fn constant_target_is_learned() {
        let c = [0.5, -1.0, 0.0, 2.0, 0.1, -0.3];
        let data = sample_set(64, 1, |_| c.to_vec());
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 1e-2,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let (w, _) = train(&data, &cfg, PatchSpec { size: 1, resolution: 1.0 }).unwrap();
        let x = w.input_stats.apply(&data[0].features);
        let pred = w.predict_delta(&x).unwrap();
        for (p, want) in pred.iter().zip(c) {
            assert!((p - want).abs() < 1e-3, "{p} vs {want}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = sample_set(50, 2, |x| x[..6].iter().map(|v| v * 2.0).collect());
        let cfg = TrainConfig {
            epochs: 5,
            hidden: vec![6],
            ..TrainConfig::default()
        };
        let patch = PatchSpec { size: 1, resolution: 1.0 };
        let (a, ha) = train(&data, &cfg, patch).unwrap();
        let (b, hb) = train(&data, &cfg, patch).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 5);
    }

    #[test]
    fn train_rejects_bad_input() {
        let cfg = TrainConfig::default();
        let patch = PatchSpec { size: 1, resolution: 1.0 };
        assert!(matches!(train(&[], &cfg, patch), Err(Error::EmptyDataset)));
        let mut data = sample_set(4, 3, |_| vec![0.0; 6]);
        data[2].features.pop();
        assert!(matches!(train(&data, &cfg, patch), Err(Error::ShapeMismatch(_))));
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&sample_set(4, 3, |_| vec![0.0; 6]), &bad, patch), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn full_batch_gradient_descent_on_linear_model_never_increases_loss() {
        let data = sample_set(80, 5, |x| (0..6).map(|k| x[k] - 0.5 * x[k + 3] + 0.1).collect());
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 1000,
            hidden: vec![],
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let (_, h) = train(&data, &cfg, PatchSpec { size: 1, resolution: 1.0 }).unwrap();
        let mut prev = h.initial.train;
        for e in &h.epochs {
            assert!(e.train <= prev + 1e-15, "{} > {prev}", e.train);
            prev = e.train;
        }
    }
}
