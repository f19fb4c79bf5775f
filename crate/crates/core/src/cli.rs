//! Command-line front end. [`run`] maps outcomes to exit codes: 0 success,
//! 1 usage, 2 bad input data or configuration, 3 numerical failure.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalsel::{
    build_scenario, fit_centered, metrics, select_model, sensor_sweep, subsample_indices, sweep_csv, Candidate,
    ProtocolConfig, Scenario,
};
use crate::field_sim::{generate_dataset, DatasetKind, SimConfig};
use crate::geometry::{make_grid, Point, SourceSpec};
use crate::gp::{predict, sample_posterior};
use crate::hyper_opt::{optimize, HyperPrior, OptimizeConfig};
use crate::io::{
    read_dataset, read_model, read_prediction, read_scene_config, write_dataset, write_model, write_prediction,
    DataSection, KernelSection, MeanSection, ModelFile, OptimizationSection, SceneConfig, Subsample,
};
use crate::kernels::{draw_mvn, gram_noisy, KernelFamily, KernelSpec};
use crate::meanfn::{MeanMode, MeanSpec};
use crate::net::{serve, FieldEngine, ServeConfig, ServeMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "emfield", version, about = "Indoor EM field reconstruction with Gaussian processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate received levels for one source and write a field CSV.
    Simulate(SimulateArgs),
    /// Learn hyperparameters from a field CSV and write a model file.
    Train(TrainArgs),
    /// Predict the grid from a model file.
    Predict(PredictArgs),
    /// Compare a prediction CSV against a truth CSV.
    Evaluate(EvaluateArgs),
    /// Compare kernel families over simulated source positions.
    SelectModel(SelectArgs),
    /// Reconstruction quality against the number of sensors.
    Sweep(SweepArgs),
    /// Run the UDP fusion centre.
    Serve(ServeArgs),
    /// Draw functions from the GP prior or posterior over the grid.
    SamplePrior(SampleArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// TOML file with optional [room], [grid] and [sensors] sections.
    #[arg(long, value_name = "FILE")]
    pub room: Option<PathBuf>,
    /// Grid spacing in metres (overrides the config file).
    #[arg(long)]
    pub grid_step: Option<f64>,
}

impl SceneArgs {
    fn load(&self) -> Result<SceneConfig> {
        let mut cfg = match &self.room {
            Some(p) => read_scene_config(p)?,
            None => SceneConfig::default(),
        };
        if let Some(step) = self.grid_step {
            cfg.grid.step = step;
            cfg.grid.shape()?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Source position index, 1..=16.
    #[arg(long, default_value_t = 2)]
    pub source: usize,
    #[arg(long, default_value_t = 3)]
    pub reflections: usize,
    /// Measurement noise standard deviation in dB.
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "matern32")]
    pub kernel: KernelFamily,
    #[arg(long, default_value = "basis")]
    pub mean: MeanMode,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    /// Standard deviation of the Gaussian hyperprior on log parameters.
    #[arg(long, default_value_t = 3.0)]
    pub prior_std: f64,
    /// Fit the raw values instead of subtracting their mean first.
    #[arg(long)]
    pub no_center: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: u64,
    /// Write only this many sensor readings (the configured array, then
    /// random grid points) instead of the whole grid.
    #[arg(long)]
    pub sensors: Option<usize>,
    /// Write noise-free values.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: u64,
    /// Learn from at most this many randomly chosen rows.
    #[arg(long, default_value_t = 200)]
    pub max_train: usize,
    /// Model file; defaults to the data path with `.model.toml` appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration optimiser trace; defaults to the model path with
    /// `.trace.log` appended.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Condition on these observations instead of the training data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 3)]
    pub reflections: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 3.0)]
    pub prior_std: f64,
    /// Training subsample size.
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long)]
    pub seed: u64,
}

impl ProtocolArgs {
    fn config(&self) -> Result<ProtocolConfig> {
        let scene = self.scene.load()?;
        Ok(ProtocolConfig {
            room: scene.room,
            grid: scene.grid,
            sensors: scene.sensors,
            reflections: self.reflections,
            noise_std_db: self.noise_std,
            n_train: self.n_train,
            restarts: self.restarts,
            prior: HyperPrior::with_std(self.prior_std),
            ..Default::default()
        })
    }
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    /// Comma-separated kernel families.
    #[arg(long, value_delimiter = ',', default_value = "se,matern32")]
    pub kernel: Vec<KernelFamily>,
    /// Comma-separated mean modes.
    #[arg(long, value_delimiter = ',', default_value = "zero")]
    pub mean: Vec<MeanMode>,
    /// Comma-separated source indices; all 16 by default.
    #[arg(long, value_delimiter = ',')]
    pub source: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, default_value_t = 2)]
    pub source: usize,
    #[arg(long, default_value = "matern32")]
    pub kernel: KernelFamily,
    #[arg(long, default_value = "basis")]
    pub mean: MeanMode,
    /// Comma-separated sensor counts.
    #[arg(long, value_delimiter = ',', default_value = "9,30,100")]
    pub sensors: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value = "127.0.0.1:9000")]
    pub listen: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:9001")]
    pub publish: SocketAddr,
    /// Also publish predictive variances on /em/field/var.
    #[arg(long)]
    pub variance: bool,
    /// Re-learn hyperparameters from frames at most this often.
    #[arg(long, value_name = "MS", requires = "seed")]
    pub refit_interval_ms: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    pub duration_secs: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value = "matern32")]
    pub kernel: KernelFamily,
    #[arg(long, default_value = "zero")]
    pub mean: MeanMode,
    /// Take the kernel and mean from a trained model instead.
    #[arg(long, conflicts_with_all = ["kernel", "mean"])]
    pub model: Option<PathBuf>,
    /// Condition on these observations to draw from the posterior.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            }
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::SelectModel(a) => select_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::SamplePrior(a) => sample_cmd(a),
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scene = a.scene.load()?;
    scene.validate()?;
    let mut cfg = SimConfig::new(SourceSpec::canonical(a.sim.source)?, a.seed);
    cfg.room = scene.room.clone();
    cfg.max_reflections = a.sim.reflections;
    cfg.noise_std_db = a.sim.noise_std;
    cfg.validate()?;
    let grid: Vec<Point<f64>> = make_grid(&scene.grid)?;
    let ds = match a.sensors {
        None => generate_dataset(&cfg, &grid, !a.noiseless, if a.noiseless { DatasetKind::Truth } else { DatasetKind::Train })?,
        Some(count) => {
            let fixed = &scene.sensors.positions;
            let mut pts: Vec<Point<f64>> = fixed.iter().copied().take(count).collect();
            if count > fixed.len() {
                let rest: Vec<Point<f64>> = grid.iter().copied().filter(|g| !fixed.contains(g)).collect();
                if count - fixed.len() > rest.len() {
                    return Err(Error::Config(format!("at most {} sensors fit on this grid", fixed.len() + rest.len())));
                }
                let idx = subsample_indices(rest.len(), count - fixed.len(), a.seed ^ 0x5e45_0125);
                pts.extend(idx.iter().map(|&i| rest[i]));
            }
            generate_dataset(&cfg, &pts, !a.noiseless, DatasetKind::Sensor)?
        }
    };
    write_dataset(&a.out, &ds)?;
    log::info!("wrote {} points to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = read_dataset::<f64>(&a.data)?;
    let mean_spec = MeanSpec::for_mode(a.model.mean);
    let (x, y, subsample) = if ds.len() > a.max_train {
        let idx = subsample_indices(ds.len(), a.max_train, a.seed);
        let sub = ds.subset(&idx);
        (sub.locations, sub.values_db, Some(Subsample { size: a.max_train, seed: a.seed }))
    } else {
        (ds.locations.clone(), ds.values_db.clone(), None)
    };
    let offset = if a.model.no_center { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
    let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let opt = optimize(
        &x,
        &yc,
        a.model.kernel,
        &mean_spec,
        &HyperPrior::with_std(a.model.prior_std),
        &OptimizeConfig::new(a.model.restarts, a.seed),
    )?;
    let kernel = opt.kernel();
    let cm = fit_centered(&x, &y, &kernel, &mean_spec, !a.model.no_center)?;

    let out = a.out.unwrap_or_else(|| with_suffix(&a.data, ".model.toml"));
    let data_ref = match (out.parent(), a.data.canonicalize()) {
        (Some(dir), Ok(abs)) => {
            let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
            match dir.canonicalize() {
                Ok(d) => abs.strip_prefix(&d).map(Path::to_path_buf).unwrap_or(abs),
                Err(_) => abs,
            }
        }
        _ => a.data.clone(),
    };
    let mf = ModelFile {
        kernel: KernelSection::from_spec(&kernel),
        mean: MeanSection::from_spec(&mean_spec),
        data: DataSection {
            path: data_ref.to_string_lossy().into_owned(),
            n_points: ds.len(),
            subsample,
            offset_db: cm.offset,
        },
        log_marginal_likelihood: cm.model.lml.total,
        optimization: Some(OptimizationSection::from_result(&opt)),
    };
    write_model(&out, &mf)?;
    let trace = a.trace.unwrap_or_else(|| with_suffix(&out, ".trace.log"));
    let mut lines = opt.trace_lines().join("\n");
    lines.push('\n');
    write_out(&trace, &lines)?;
    println!("model: {}", out.display());
    println!("kernel: {}", kernel.family);
    for (name, v) in kernel.family.param_names().iter().zip(kernel.hyper.natural()) {
        println!("  {name} = {v:.6}");
    }
    println!("log marginal likelihood: {:.6}", cm.model.lml.total);
    Ok(())
}

/// Model spec plus the observations it conditions on.
struct LoadedModel {
    kernel: KernelSpec<f64>,
    mean: MeanSpec<f64>,
    x: Vec<Point<f64>>,
    y: Vec<f64>,
    center: bool,
}

fn load_model(model: &Path, data: Option<&Path>) -> Result<LoadedModel> {
    let mf = read_model(model)?;
    let kernel = mf.kernel.to_spec()?;
    let mean = mf.mean.to_spec()?;
    let center = mf.data.offset_db != 0.0;
    let (x, y) = match data {
        Some(p) => {
            let ds = read_dataset::<f64>(p)?;
            (ds.locations, ds.values_db)
        }
        None => {
            let path = mf.data_path(model);
            let ds = read_dataset::<f64>(&path)?;
            if ds.len() != mf.data.n_points {
                return Err(Error::Config(format!(
                    "{} has {} rows but the model was trained on {}",
                    path.display(),
                    ds.len(),
                    mf.data.n_points
                )));
            }
            let ds = match mf.data.subsample {
                Some(s) => ds.subset(&subsample_indices(ds.len(), s.size, s.seed)),
                None => ds,
            };
            (ds.locations, ds.values_db)
        }
    };
    Ok(LoadedModel { kernel, mean, x, y, center })
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let lm = load_model(&a.model, a.data.as_deref())?;
    let scene = a.scene.load()?;
    let grid: Vec<Point<f64>> = make_grid(&scene.grid)?;
    let cm = fit_centered(&lm.x, &lm.y, &lm.kernel, &lm.mean, lm.center)?;
    let mut p = predict(&cm.model, &grid, false, false);
    for m in p.mean.iter_mut() {
        *m += cm.offset;
    }
    if p.clamped > 0 {
        log::warn!("{} negative predictive variances clamped to 0", p.clamped);
    }
    write_prediction(&a.out, &grid, &p)?;
    println!("wrote {} predictions to {}", grid.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let truth = read_prediction::<f64>(&a.truth)?;
    let pred = read_prediction::<f64>(&a.pred)?;
    if truth.locations != pred.locations {
        return Err(Error::Config("truth and prediction files list different locations".into()));
    }
    let report = metrics(&truth.values, &pred.values)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_out(out, &text)?;
    }
    if report.correlation.is_nan() {
        return Err(Error::CorrelationUndefined(Box::new(report)));
    }
    Ok(())
}

fn scenarios(cfg: &ProtocolConfig, sources: &[usize], seed: u64) -> Result<Vec<Scenario<f64>>> {
    sources.iter().map(|&s| build_scenario(cfg, SourceSpec::canonical(s)?, seed)).collect()
}

fn select_cmd(a: SelectArgs) -> Result<()> {
    let cfg = a.protocol.config()?;
    let sources: Vec<usize> = if a.source.is_empty() { (1..=16).collect() } else { a.source.clone() };
    let sc = scenarios(&cfg, &sources, a.protocol.seed)?;
    let mut cands = Vec::new();
    for &m in &a.mean {
        for &k in &a.kernel {
            cands.push(Candidate::new(k, MeanSpec::for_mode(m)));
        }
    }
    let table = select_model(&sc, &cands, &cfg)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        write_out(out, &table.to_csv())?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = a.protocol.config()?;
    let sc = scenarios(&cfg, &[a.source], a.protocol.seed)?.remove(0);
    let rows = sensor_sweep(&sc, a.kernel, &MeanSpec::for_mode(a.mean), &a.sensors, &cfg)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        write_out(out, &csv)?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let lm = load_model(&a.model, None)?;
    let scene = a.scene.load()?;
    let grid: Vec<Point<f64>> = make_grid(&scene.grid)?;
    let (rows, _) = scene.grid.shape()?;
    let engine = FieldEngine::new(lm.kernel, lm.mean, grid, rows, lm.center)?;
    let mut cfg = ServeConfig::new(a.listen, a.publish);
    cfg.sensors = scene.sensors;
    cfg.publish_variance = a.variance;
    if let (Some(ms), Some(seed)) = (a.refit_interval_ms, a.seed) {
        cfg.mode = ServeMode::RefitOnFrame {
            interval: Duration::from_millis(ms),
            prior: HyperPrior::default(),
            optimizer: OptimizeConfig::new(a.restarts, seed),
        };
    }
    let handle = serve(engine, cfg)?;
    eprintln!("listening on {}, publishing to {}", handle.local_addr, a.publish);
    match a.duration_secs {
        Some(s) => {
            std::thread::sleep(Duration::from_secs_f64(s.max(0.0)));
            let stats = handle.stats.to_text();
            handle.shutdown();
            eprint!("{stats}");
        }
        None => handle.wait(),
    }
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    if a.draws == 0 {
        return Err(Error::Config("--draws must be at least 1".into()));
    }
    let scene = a.scene.load()?;
    let grid: Vec<Point<f64>> = make_grid(&scene.grid)?;
    let draws = match (&a.model, &a.data) {
        (Some(m), data) => {
            let lm = load_model(m, data.as_deref())?;
            let cm = fit_centered(&lm.x, &lm.y, &lm.kernel, &lm.mean, lm.center)?;
            let mut d = sample_posterior(&cm.model, &grid, a.draws, a.seed)?;
            d.iter_mut().flatten().for_each(|v| *v += cm.offset);
            d
        }
        (None, Some(data)) => {
            let ds = read_dataset::<f64>(data)?;
            let kernel = KernelSpec::default_for(a.kernel);
            let cm = fit_centered(&ds.locations, &ds.values_db, &kernel, &MeanSpec::for_mode(a.mean), true)?;
            let mut d = sample_posterior(&cm.model, &grid, a.draws, a.seed)?;
            d.iter_mut().flatten().for_each(|v| *v += cm.offset);
            d
        }
        (None, None) => {
            let kernel = KernelSpec::default_for(a.kernel);
            let mean = MeanSpec::for_mode(a.mean);
            let prior_mean = match mean.mode {
                MeanMode::Zero => vec![0.0; grid.len()],
                MeanMode::Basis => mean.values(&grid, &mean.prior_mean)?,
            };
            let mut noiseless = kernel.clone();
            noiseless.hyper.log_noise_var = -30.0;
            let (_, chol) = gram_noisy(&noiseless, &grid)?;
            draw_mvn(&prior_mean, &chol, a.draws, a.seed)
        }
    };
    let mut s = String::from("x,y");
    for k in 1..=draws.len() {
        s.push_str(&format!(",draw_{k}"));
    }
    s.push('\n');
    for (i, p) in grid.iter().enumerate() {
        s.push_str(&format!("{},{}", crate::io::round_sig(p.x, 9), crate::io::round_sig(p.y, 9)));
        for d in &draws {
            s.push_str(&format!(",{}", crate::io::round_sig(d[i], 9)));
        }
        s.push('\n');
    }
    write_out(&a.out, &s)?;
    println!("wrote {} draws over {} points to {}", draws.len(), grid.len(), a.out.display());
    Ok(())
}
