//! `terradyn` command-line interface.
//!
//! A `--config` file of `key = value` lines supplies defaults for the
//! subcommand's flags; flags given on the command line win.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, EvalOptions, StateGroup};
use crate::dataio::{self, load_dataset, write_atomic, Split, SyntheticConfig};
use crate::energy::{self, EnergyModel, FeatureSelection};
use crate::error::{Error, ErrorClass, Result};
use crate::learn::{self, MlpWeights, Optimizer, PatchSpec, TrainConfig};
use crate::models::{Dynamics, ModelKind};
use crate::rollout::{rollout, RolloutConfig};
use crate::terrain::ElevationMap;
use crate::types::VehicleParams;

#[derive(Debug, Parser)]
#[command(
    name = "terradyn",
    version,
    about = "Vehicle dynamics models, aggressiveness scoring and rollout benchmarks",
    arg_required_else_help = true,
    args_override_self = true
)]
struct Cli {
    /// File of `flag = value` defaults for the subcommand
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for rollouts
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic map and trajectory dataset
    Generate(GenerateArgs),
    /// Fit an energy model to a dataset
    FitEnergy(FitEnergyArgs),
    /// Score trajectories with an energy model
    Score(ScoreArgs),
    /// Train the learned dynamics model
    Train(TrainArgs),
    /// Roll a model out over one trajectory
    Rollout(RolloutArgs),
    /// Benchmark models on a dataset
    Bench(BenchArgs),
    /// Fit cubic energy-vs-error trends to a scatter file
    Trend(TrendArgs),
    /// Render a benchmark CSV as a text table
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Nominal,
    Fast,
    FastSteer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn get(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "nominal")]
    preset: Preset,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    trajectories: Option<usize>,
    /// Horizon, seconds
    #[arg(long)]
    horizon: Option<f64>,
    /// Bump amplitude standard deviation, m
    #[arg(long)]
    roughness: Option<f64>,
    #[arg(long)]
    speed_min: Option<f64>,
    #[arg(long)]
    speed_max: Option<f64>,
    /// Steering amplitude, rad
    #[arg(long)]
    steer_amplitude: Option<f64>,
    #[arg(long)]
    noise_velocity: Option<f64>,
    #[arg(long)]
    noise_yaw_rate: Option<f64>,
    /// Parameters of the data-generating vehicle
    #[arg(long)]
    truth_params: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitEnergyArgs {
    /// Dataset manifest
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Differentiated-state components (0-2 accel, 3-5 rates, 6-8 velocity)
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    components: Vec<usize>,
    #[arg(long, default_value_t = energy::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    energy_model: PathBuf,
    /// A single trajectory file
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    trajectory: Option<PathBuf>,
    /// A dataset manifest
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Write scores here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    patch_resolution: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    /// Weights file to write
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss table
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "noslip3d,slip3d")]
    models: Vec<ModelKind>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    /// Machine-readable report
    #[arg(long)]
    out: PathBuf,
    /// Text table
    #[arg(long)]
    table: Option<PathBuf>,
    /// Energy model for the scatter file
    #[arg(long, requires = "scatter")]
    energy_model: Option<PathBuf>,
    /// Per-trajectory energy and error rows
    #[arg(long, requires = "energy_model")]
    scatter: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrendArgs {
    #[arg(long)]
    scatter: PathBuf,
    /// Error column to fit; all columns when omitted
    #[arg(long)]
    group: Option<StateGroup>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Benchmark CSV
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

const SUBCOMMANDS: [&str; 8] = ["generate", "fit-energy", "score", "train", "rollout", "bench", "trend", "report"];

/// Reads `--config FILE` from the raw arguments and splices its entries in
/// as flags right after the subcommand, ahead of the user's own flags.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ConfigInvalid(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" {
            return Err(Error::ConfigInvalid("config files cannot include other config files".into()));
        }
        injected.push(OsString::from(format!("--{key}")));
        injected.push(OsString::from(v.trim()));
    }
    let Some(at) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut out = args[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

/// Parses and runs a command line, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    let first = match e.kind() {
                        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "missing subcommand".to_string(),
                        _ => e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string(),
                    };
                    eprintln!("{}: {}", ErrorClass::Usage.name(), first);
                    ErrorClass::Usage.exit_code()
                }
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    let class = e.class();
    eprintln!("{}: {}", class.name(), e.to_string().replace('\n', " "));
    class.exit_code()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::ConfigInvalid(format!(
            "output directory `{}` does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn load_params(path: Option<&PathBuf>) -> Result<VehicleParams> {
    match path {
        Some(p) => VehicleParams::load(p),
        None => Ok(VehicleParams::default()),
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a, cli.seed),
        Command::FitEnergy(a) => fit_energy(a),
        Command::Score(a) => score(a),
        Command::Train(a) => train(a, cli.seed),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Bench(a) => bench_cmd(a, cli.jobs),
        Command::Trend(a) => trend_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    if let Some(p) = &a.truth_params {
        require_file(p)?;
    }
    let mut cfg = match a.preset {
        Preset::Nominal => SyntheticConfig::nominal(),
        Preset::Fast => SyntheticConfig::nominal().scaled("fast", 1.5, 1.0),
        Preset::FastSteer => SyntheticConfig::nominal().scaled("fast-steer", 2.0, 2.0),
    };
    if let Some(v) = &a.id {
        cfg.dataset_id = v.clone();
    }
    if let Some(v) = a.trajectories {
        cfg.trajectory_count = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon_s = v;
    }
    if let Some(v) = a.roughness {
        cfg.roughness = v;
    }
    if let Some(v) = a.speed_min {
        cfg.speed_range.0 = v;
    }
    if let Some(v) = a.speed_max {
        cfg.speed_range.1 = v;
    }
    if let Some(v) = a.steer_amplitude {
        cfg.steering.amplitude = v;
    }
    if let Some(v) = a.noise_velocity {
        cfg.noise.velocity_std = v;
    }
    if let Some(v) = a.noise_yaw_rate {
        cfg.noise.yaw_rate_std = v;
    }
    if let Some(p) = &a.truth_params {
        cfg.truth_params = VehicleParams::load(p)?;
    }
    let d = dataio::generate_synthetic(seed, &cfg)?;
    let path = dataio::save_dataset(&a.out, &d.manifest, &d.map, &d.trajectories)?;
    println!("{}", path.display());
    Ok(())
}

fn fit_energy(a: &FitEnergyArgs) -> Result<()> {
    require_file(&a.data)?;
    require_parent(&a.out)?;
    let sel = FeatureSelection::new(a.components.clone())?;
    let d = load_dataset(&a.data, a.split.get())?;
    let m = energy::fit(&d.trajectories, &sel, a.temperature)?;
    write_atomic(&a.out, m.to_text().as_bytes())
}

fn score(a: &ScoreArgs) -> Result<()> {
    require_file(&a.energy_model)?;
    if let Some(p) = a.trajectory.as_ref().or(a.data.as_ref()) {
        require_file(p)?;
    }
    if let Some(p) = &a.out {
        require_parent(p)?;
    }
    let m = EnergyModel::load(&a.energy_model)?;
    let trajectories = match (&a.trajectory, &a.data) {
        (Some(t), _) => vec![dataio::load_trajectory(t)?],
        (None, Some(d)) => load_dataset(d, a.split.get())?.trajectories,
        (None, None) => unreachable!("clap requires one input"),
    };
    let mut out = String::from("id,energy\n");
    for t in &trajectories {
        let _ = writeln!(out, "{},{:?}", t.id, energy::energy(&m, t)?);
    }
    emit(a.out.as_ref(), &out)
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    require_file(&a.data)?;
    require_parent(&a.out)?;
    if let Some(h) = &a.history {
        require_parent(h)?;
    }
    let patch = PatchSpec {
        size: a.patch_size,
        resolution: a.patch_resolution,
    };
    if patch.size.is_multiple_of(2) || !(patch.resolution > 0.0) {
        return Err(Error::ConfigInvalid("patch size must be odd and resolution positive".into()));
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed,
        hidden: a.hidden.clone(),
        validation_fraction: a.validation_fraction,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
    };
    cfg.validate()?;
    let d = load_dataset(&a.data, a.split.get())?;
    let samples = learn::transition_samples(&d.trajectories, &d.map, patch)?;
    let (weights, history) = learn::train(&samples, &cfg, patch)?;
    write_atomic(&a.out, &weights.to_bytes())?;
    if let Some(h) = &a.history {
        write_atomic(h, history.to_report().as_bytes())?;
    }
    Ok(())
}

fn load_weights(model: ModelKind, path: Option<&PathBuf>) -> Result<Option<MlpWeights>> {
    match (model, path) {
        (ModelKind::Learned, None) => Err(Error::ConfigInvalid("the learned model needs --weights".into())),
        (_, Some(p)) => Ok(Some(MlpWeights::load(p)?)),
        (_, None) => Ok(None),
    }
}

fn rollout_cmd(a: &RolloutArgs) -> Result<()> {
    for p in [Some(&a.map), Some(&a.trajectory), a.weights.as_ref(), a.params.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    require_parent(&a.out)?;
    if a.substeps == 0 {
        return Err(Error::ConfigInvalid("substeps must be at least one".into()));
    }
    let weights = load_weights(a.model, a.weights.as_ref())?;
    let params = load_params(a.params.as_ref())?;
    let map = ElevationMap::load(&a.map)?;
    let gt = dataio::load_trajectory(&a.trajectory)?;
    let model = Dynamics::new(a.model, weights.as_ref())?;
    let r = rollout(&model, &gt, &map, &params, &RolloutConfig { substeps: a.substeps })?;
    dataio::save_trajectory(&r.predicted, &a.out)
}

fn bench_cmd(a: &BenchArgs, jobs: usize) -> Result<()> {
    for p in [Some(&a.data), a.weights.as_ref(), a.params.as_ref(), a.energy_model.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    for p in [Some(&a.out), a.table.as_ref(), a.scatter.as_ref()].into_iter().flatten() {
        require_parent(p)?;
    }
    if a.models.is_empty() || a.substeps == 0 || jobs == 0 {
        return Err(Error::ConfigInvalid("need at least one model, one substep and one job".into()));
    }
    let weights = match a.models.contains(&ModelKind::Learned) {
        true => load_weights(ModelKind::Learned, a.weights.as_ref())?,
        false => None,
    };
    let params = load_params(a.params.as_ref())?;
    let d = load_dataset(&a.data, a.split.get())?;
    let opts = EvalOptions {
        rollout: RolloutConfig { substeps: a.substeps },
        jobs,
    };
    let report = bench::evaluate(&d.manifest.dataset, &a.models, &d.trajectories, &d.map, &params, weights.as_ref(), &opts)?;
    let scatter = match &a.energy_model {
        Some(p) => Some(bench::scatter(&report, &EnergyModel::load(p)?, &d.trajectories)?),
        None => None,
    };
    write_atomic(&a.out, bench::report_to_csv(&report).as_bytes())?;
    if let Some(t) = &a.table {
        write_atomic(t, bench::render_report(&report).as_bytes())?;
    }
    if let (Some(path), Some(points)) = (&a.scatter, scatter) {
        write_atomic(path, bench::scatter_to_csv(&points).as_bytes())?;
    }
    Ok(())
}

fn trend_cmd(a: &TrendArgs) -> Result<()> {
    require_file(&a.scatter)?;
    require_parent(&a.out)?;
    let text = std::fs::read_to_string(&a.scatter).map_err(|e| Error::io(&a.scatter, e))?;
    let points = bench::scatter_from_csv(&text, &a.scatter)?;
    let mut models: Vec<ModelKind> = Vec::new();
    for p in &points {
        if !models.contains(&p.model) {
            models.push(p.model);
        }
    }
    let groups: Vec<StateGroup> = match a.group {
        Some(g) => vec![g],
        None => StateGroup::ALL.to_vec(),
    };
    let mut fits = Vec::new();
    for m in models {
        for &g in &groups {
            let xy: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.model == m)
                .map(|p| (p.energy, p.hmne[g as usize]))
                .collect();
            fits.push((m, g, bench::trend(&xy)?));
        }
    }
    write_atomic(&a.out, bench::trend_to_text(&fits).as_bytes())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    require_file(&a.report)?;
    if let Some(p) = &a.out {
        require_parent(p)?;
    }
    let text = std::fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let report = bench::report_from_csv(&text, &a.report)?;
    emit(a.out.as_ref(), &bench::render_report(&report))
}
