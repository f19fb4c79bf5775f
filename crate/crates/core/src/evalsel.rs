//! Reconstruction metrics and the model-comparison protocol: learn
//! hyperparameters on a training subsample, condition on the sensor
//! readings, predict the full grid and score it against the noiseless truth.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_sim::{generate_dataset, DatasetKind, FieldDataset, SimConfig};
use crate::geometry::{make_grid, GridSpec, Point, RoomConfig, SensorArray, SourceSpec};
use crate::gp::{fit, predict, TrainedModel};
use crate::hyper_opt::{optimize, HyperPrior, OptResult, OptimizeConfig};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::meanfn::MeanSpec;
use crate::optim::ScgOptions;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub rmse: f64,
    /// MSE over the mean of `|truth|`.
    pub nmse_mean: f64,
    /// MSE over `max(truth) − min(truth)`.
    pub nmse_range: f64,
    pub nrmse_mean: f64,
    pub nrmse_range: f64,
    /// Pearson correlation; NaN when the truth is constant.
    pub correlation: f64,
    pub n_points: usize,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mse", self.mse),
            ("rmse", self.rmse),
            ("nmse_mean", self.nmse_mean),
            ("nmse_range", self.nmse_range),
            ("nrmse_mean", self.nrmse_mean),
            ("nrmse_range", self.nrmse_range),
            ("correlation", self.correlation),
        ] {
            let _ = writeln!(s, "{k} = {v:.9e}");
        }
        let _ = writeln!(s, "n_points = {}", self.n_points);
        s
    }
}

/// All metrics, with `correlation` left NaN when it is undefined.
pub fn metrics<T: Real>(truth: &[T], pred: &[T]) -> Result<EvalReport> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!("truth has {} values, prediction {}", truth.len(), pred.len())));
    }
    let n = truth.len();
    if n < 2 {
        return Err(Error::Contract("evaluation needs at least 2 points".into()));
    }
    let t: Vec<f64> = truth.iter().map(|v| v.to_f64_lossy()).collect();
    let p: Vec<f64> = pred.iter().map(|v| v.to_f64_lossy()).collect();
    if t.iter().chain(&p).any(|v| !v.is_finite()) {
        return Err(Error::Contract("evaluation inputs must be finite".into()));
    }
    let nf = n as f64;
    let mse = t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nf;
    let rmse = mse.sqrt();
    let mean_abs = t.iter().map(|v| v.abs()).sum::<f64>() / nf;
    let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;

    let mt = t.iter().sum::<f64>() / nf;
    let mp = p.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in t.iter().zip(&p) {
        sxy += (a - mt) * (b - mp);
        sxx += (a - mt) * (a - mt);
        syy += (b - mp) * (b - mp);
    }
    let correlation = if sxx > 0.0 && syy > 0.0 {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    } else {
        f64::NAN
    };

    Ok(EvalReport {
        mse,
        rmse,
        nmse_mean: mse / mean_abs,
        nmse_range: mse / range,
        nrmse_mean: rmse / mean_abs,
        nrmse_range: rmse / range,
        correlation,
        n_points: n,
    })
}

/// Like [`metrics`], but a constant truth (or constant prediction) is an
/// error carrying the remaining fields.
pub fn evaluate<T: Real>(truth: &[T], pred: &[T]) -> Result<EvalReport> {
    let r = metrics(truth, pred)?;
    if r.correlation.is_nan() {
        return Err(Error::CorrelationUndefined(Box::new(r)));
    }
    Ok(r)
}

/// Everything that defines one experiment apart from the source and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub room: RoomConfig,
    pub grid: GridSpec,
    pub sensors: SensorArray,
    pub reflections: usize,
    pub noise_std_db: f64,
    pub tx_power_dbm: f64,
    /// Unset means one carrier wavelength.
    pub near_field_radius_m: Option<f64>,
    /// Size of the random grid subsample the hyperparameters are learned on.
    pub n_train: usize,
    pub restarts: usize,
    pub prior: HyperPrior,
    pub scg: ScgOptions,
    /// Subtract the mean of the fitted observations before fitting and add
    /// it back to predictions.
    pub center: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            room: RoomConfig::default(),
            grid: GridSpec::default(),
            sensors: SensorArray::default(),
            reflections: 3,
            noise_std_db: 0.5,
            tx_power_dbm: 0.0,
            near_field_radius_m: None,
            n_train: 200,
            restarts: 3,
            prior: HyperPrior::default(),
            scg: ScgOptions::default(),
            center: true,
        }
    }
}

impl ProtocolConfig {
    pub fn sim_config(&self, source: SourceSpec, seed: u64) -> SimConfig {
        let mut c = SimConfig::new(source, seed);
        c.room = self.room.clone();
        c.max_reflections = self.reflections;
        c.noise_std_db = self.noise_std_db;
        c.tx_power_dbm = self.tx_power_dbm;
        c.near_field_radius_m = self.near_field_radius_m;
        c
    }
}

/// One source position: noiseless grid truth, a noisy training subsample,
/// and noisy sensor readings with independent noise. `readings` covers the
/// fixed sensors followed by the remaining grid points in a seeded random
/// order, so any prefix is a valid sensor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub id: String,
    pub source: SourceSpec,
    pub seed: u64,
    pub truth: FieldDataset<T>,
    pub train: FieldDataset<T>,
    pub readings: FieldDataset<T>,
    pub n_fixed_sensors: usize,
}

impl<T: Real> Scenario<T> {
    /// The first `count` readings: the fixed array, then extra grid points.
    pub fn sensors(&self, count: usize) -> Result<FieldDataset<T>> {
        if count == 0 || count > self.readings.len() {
            return Err(Error::Config(format!(
                "sensor count must be in 1..={}, got {count}",
                self.readings.len()
            )));
        }
        Ok(self.readings.subset(&(0..count).collect::<Vec<_>>()))
    }
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// `k` distinct indices from `0..n` in a seeded random order.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k.min(n));
    idx
}

pub fn build_scenario<T: Real>(cfg: &ProtocolConfig, source: SourceSpec, seed: u64) -> Result<Scenario<T>> {
    cfg.room.validate()?;
    cfg.sensors.validate(&cfg.room)?;
    let grid: Vec<Point<T>> = make_grid(&cfg.grid)?;
    if cfg.n_train == 0 || cfg.n_train > grid.len() {
        return Err(Error::Config(format!("n_train must be in 1..={}, got {}", grid.len(), cfg.n_train)));
    }

    let truth = generate_dataset(&cfg.sim_config(source, seed), &grid, false, DatasetKind::Truth)?;

    let idx = subsample_indices(grid.len(), cfg.n_train, sub_seed(seed, 1));
    let train_pts: Vec<Point<T>> = idx.iter().map(|&i| grid[i]).collect();
    let train = generate_dataset(&cfg.sim_config(source, sub_seed(seed, 2)), &train_pts, true, DatasetKind::Train)?;

    let fixed: Vec<Point<T>> = cfg.sensors.positions.iter().map(|p| p.cast()).collect();
    let mut rest: Vec<Point<T>> = grid.iter().copied().filter(|g| !fixed.contains(g)).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 3)));
    let order: Vec<Point<T>> = fixed.iter().copied().chain(rest).collect();
    let readings = generate_dataset(&cfg.sim_config(source, sub_seed(seed, 4)), &order, true, DatasetKind::Sensor)?;

    Ok(Scenario {
        id: format!("source{:02}", source.index),
        source,
        seed,
        truth,
        train,
        readings,
        n_fixed_sensors: fixed.len(),
    })
}

/// A GP fitted to observations shifted by `offset`.
#[derive(Debug, Clone)]
pub struct CenteredModel<T> {
    pub model: TrainedModel<T>,
    pub offset: T,
}

pub fn fit_centered<T: Real>(
    x: &[Point<T>],
    y: &[T],
    kernel: &KernelSpec<T>,
    mean: &MeanSpec<T>,
    center: bool,
) -> Result<CenteredModel<T>> {
    let offset = if center && !y.is_empty() {
        y.iter().copied().sum::<T>() / T::lit(y.len() as f64)
    } else {
        T::zero()
    };
    let yc: Vec<T> = y.iter().map(|&v| v - offset).collect();
    Ok(CenteredModel { model: fit(x, &yc, kernel, mean)?, offset })
}

impl<T: Real> CenteredModel<T> {
    pub fn predict_mean(&self, xq: &[Point<T>]) -> Vec<T> {
        predict(&self.model, xq, false, false).mean.into_iter().map(|m| m + self.offset).collect()
    }
}

/// Learns hyperparameters on the scenario's training set.
pub fn learn<T: Real>(
    scenario: &Scenario<T>,
    family: KernelFamily,
    mean: &MeanSpec<T>,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<OptResult<T>> {
    let y = &scenario.train.values_db;
    let offset =
        if cfg.center { y.iter().copied().sum::<T>() / T::lit(y.len() as f64) } else { T::zero() };
    let yc: Vec<T> = y.iter().map(|&v| v - offset).collect();
    let mut oc = OptimizeConfig::new(cfg.restarts, seed);
    oc.scg = cfg.scg;
    optimize(&scenario.train.locations, &yc, family, mean, &cfg.prior, &oc)
}

/// Conditions on the first `n_sensors` readings with fixed hyperparameters
/// and scores the full-grid prediction.
pub fn reconstruct<T: Real>(
    scenario: &Scenario<T>,
    kernel: &KernelSpec<T>,
    mean: &MeanSpec<T>,
    n_sensors: usize,
    center: bool,
) -> Result<(Vec<T>, EvalReport)> {
    let obs = scenario.sensors(n_sensors)?;
    let cm = fit_centered(&obs.locations, &obs.values_db, kernel, mean, center)?;
    let pred = cm.predict_mean(&scenario.truth.locations);
    let report = metrics(&scenario.truth.values_db, &pred)?;
    Ok((pred, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub label: String,
    pub family: KernelFamily,
    pub mean: MeanSpec<T>,
}

impl<T: Real> Candidate<T> {
    pub fn new(family: KernelFamily, mean: MeanSpec<T>) -> Self {
        Candidate { label: format!("{}-{}", family.name(), mean.mode), family, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub dataset: String,
    pub model: String,
    /// Range-normalised NMSE; NaN when the cell failed.
    pub nmse: f64,
    pub nmse_mean: f64,
    pub correlation: f64,
    pub objective: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    /// `(dataset, winning model)`; `None` when every candidate failed.
    pub winners: Vec<(String, Option<String>)>,
}

impl SelectionTable {
    pub fn row(&self, dataset: &str, model: &str) -> Option<&SelectionRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.model == model)
    }

    pub fn winner(&self, dataset: &str) -> Option<&str> {
        self.winners.iter().find(|(d, _)| d == dataset).and_then(|(_, w)| w.as_deref())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,model,nmse,nmse_mean,correlation,objective,winner,error\n");
        for r in &self.rows {
            let win = self.winner(&r.dataset) == Some(r.model.as_str());
            let _ = writeln!(
                s,
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
                r.dataset,
                r.model,
                r.nmse,
                r.nmse_mean,
                r.correlation,
                r.objective,
                win,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<10} {:<w$} {:>10} {:>11}\n", "dataset", "model", "nmse", "correlation");
        for r in &self.rows {
            let mark = if self.winner(&r.dataset) == Some(r.model.as_str()) { " *" } else { "" };
            let _ = writeln!(s, "{:<10} {:<w$} {:>10.4} {:>11.4}{mark}", r.dataset, r.model, r.nmse, r.correlation);
        }
        s
    }
}

fn run_cell<T: Real>(scenario: &Scenario<T>, cand: &Candidate<T>, cfg: &ProtocolConfig) -> Result<(EvalReport, f64)> {
    let opt = learn(scenario, cand.family, &cand.mean, cfg, scenario.seed)?;
    let (_, report) =
        reconstruct(scenario, &opt.kernel(), &opt.mean(&cand.mean), scenario.n_fixed_sensors, cfg.center)?;
    Ok((report, opt.best_objective.to_f64_lossy()))
}

/// Every candidate on every scenario. The winner per scenario has the
/// lowest range-normalised NMSE; ties go to the earlier candidate and
/// failed cells never win.
pub fn select_model<T: Real>(
    scenarios: &[Scenario<T>],
    candidates: &[Candidate<T>],
    cfg: &ProtocolConfig,
) -> Result<SelectionTable> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate models".into()));
    }
    let cells: Vec<(usize, usize)> =
        (0..scenarios.len()).flat_map(|s| (0..candidates.len()).map(move |c| (s, c))).collect();
    let rows: Vec<SelectionRow> = cells
        .par_iter()
        .map(|&(s, c)| {
            let (sc, cand) = (&scenarios[s], &candidates[c]);
            let base = SelectionRow {
                dataset: sc.id.clone(),
                model: cand.label.clone(),
                nmse: f64::NAN,
                nmse_mean: f64::NAN,
                correlation: f64::NAN,
                objective: f64::NAN,
                error: None,
            };
            match run_cell(sc, cand, cfg) {
                Ok((r, obj)) => SelectionRow {
                    nmse: r.nmse_range,
                    nmse_mean: r.nmse_mean,
                    correlation: r.correlation,
                    objective: obj,
                    ..base
                },
                Err(e) => SelectionRow { error: Some(e.to_string()), ..base },
            }
        })
        .collect();

    let winners = scenarios
        .iter()
        .enumerate()
        .map(|(s, sc)| {
            let mut best: Option<&SelectionRow> = None;
            for r in &rows[s * candidates.len()..(s + 1) * candidates.len()] {
                if r.error.is_none() && !r.nmse.is_nan() && best.is_none_or(|b| r.nmse < b.nmse) {
                    best = Some(r);
                }
            }
            (sc.id.clone(), best.map(|r| r.model.clone()))
        })
        .collect();
    Ok(SelectionTable { rows, winners })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub count: usize,
    pub nmse: f64,
    pub nmse_mean: f64,
    pub correlation: f64,
}

/// Learns hyperparameters once, then reconstructs from each sensor count.
/// Counts beyond the fixed array add grid points in the scenario's seeded
/// order, so larger sets contain smaller ones.
pub fn sensor_sweep<T: Real>(
    scenario: &Scenario<T>,
    family: KernelFamily,
    mean: &MeanSpec<T>,
    counts: &[usize],
    cfg: &ProtocolConfig,
) -> Result<Vec<SweepRow>> {
    let opt = learn(scenario, family, mean, cfg, scenario.seed)?;
    let (kernel, mean) = (opt.kernel(), opt.mean(mean));
    counts
        .par_iter()
        .map(|&count| {
            let (_, r) = reconstruct(scenario, &kernel, &mean, count, cfg.center)?;
            Ok(SweepRow { count, nmse: r.nmse_range, nmse_mean: r.nmse_mean, correlation: r.correlation })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("count,nmse,nmse_mean,correlation\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e}", r.count, r.nmse, r.nmse_mean, r.correlation);
    }
    s
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
