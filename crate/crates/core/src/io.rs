//! File formats: field CSVs with a sibling metadata file, prediction CSVs,
//! the TOML model file and the room/grid/sensor config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_sim::{DatasetKind, FieldDataset, SimConfig};
use crate::geometry::{GridSpec, Point, RoomConfig, SensorArray};
use crate::gp::Prediction;
use crate::hyper_opt::OptResult;
use crate::kernels::{HyperParams, KernelFamily, KernelSpec};
use crate::linalg::Mat;
use crate::meanfn::{MeanMode, MeanSpec};
use crate::scalar::Real;

pub const DATASET_HEADER: &str = "x,y,value_db";
pub const PREDICTION_HEADER: &str = "x,y,value_db,variance";

/// Rounds to `digits` significant digits.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", digits.saturating_sub(1), v).parse().unwrap_or(v)
}

/// Shortest decimal that survives rounding to 9 significant digits.
fn fmt9(v: f64) -> String {
    format!("{}", round_sig(v, 9))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// `data.csv` → `data.csv.meta.toml`.
pub fn metadata_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
}

fn dataset_csv<T: Real>(locations: &[Point<T>], values: &[T], variance: Option<&[T]>) -> String {
    let mut s = String::with_capacity(32 * values.len());
    s.push_str(if variance.is_some() { PREDICTION_HEADER } else { DATASET_HEADER });
    s.push('\n');
    for (i, (p, v)) in locations.iter().zip(values).enumerate() {
        let _ = write!(s, "{},{},{}", fmt9(p.x.to_f64_lossy()), fmt9(p.y.to_f64_lossy()), fmt9(v.to_f64_lossy()));
        if let Some(var) = variance {
            let _ = write!(s, ",{}", fmt9(var[i].to_f64_lossy()));
        }
        s.push('\n');
    }
    s
}

/// Writes the CSV and its metadata sibling.
pub fn write_dataset<T: Real>(path: &Path, ds: &FieldDataset<T>) -> Result<()> {
    ds.validate()?;
    write_text(path, &dataset_csv(&ds.locations, &ds.values_db, None))?;
    let meta = DatasetMeta { kind: ds.kind, n_points: ds.len(), sim: ds.sim.clone() };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(format!("serialising metadata: {e}")))?;
    write_text(&metadata_path(path), &text)
}

/// Parsed rows of a field or prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable<T> {
    pub locations: Vec<Point<T>>,
    pub values: Vec<T>,
    pub variance: Option<Vec<T>>,
}

/// Parses `x,y,value_db` or `x,y,value_db,variance`. LF and CRLF line
/// endings are both accepted; blank lines are skipped.
pub fn parse_csv<T: Real>(path: &Path, text: &str) -> Result<CsvTable<T>> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header.trim_start_matches('\u{feff}').trim();
    let with_var = match header {
        DATASET_HEADER => false,
        PREDICTION_HEADER => true,
        other => {
            return Err(parse_err(
                path,
                1,
                format!("expected header '{DATASET_HEADER}' or '{PREDICTION_HEADER}', found '{other}'"),
            ))
        }
    };
    let ncol = if with_var { 4 } else { 3 };
    let mut table = CsvTable { locations: vec![], values: vec![], variance: with_var.then(Vec::new) };
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != ncol {
            return Err(parse_err(path, lineno, format!("expected {ncol} fields, found {}", fields.len())));
        }
        let mut nums = [0.0f64; 4];
        for (k, f) in fields.iter().enumerate() {
            nums[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("field {} is not a finite number: '{f}'", k + 1)))?;
        }
        table.locations.push(Point::new(T::lit(nums[0]), T::lit(nums[1])));
        table.values.push(T::lit(nums[2]));
        if let Some(v) = table.variance.as_mut() {
            if nums[3] < 0.0 {
                return Err(parse_err(path, lineno, "variance is negative"));
            }
            v.push(T::lit(nums[3]));
        }
    }
    if table.values.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(table)
}

/// Reads a field CSV (a prediction CSV's variance column is ignored) and
/// its metadata sibling when present.
pub fn read_dataset<T: Real>(path: &Path) -> Result<FieldDataset<T>> {
    let table = parse_csv::<T>(path, &read_text(path)?)?;
    let meta_path = metadata_path(path);
    let meta = if meta_path.exists() {
        let m: DatasetMeta = toml::from_str(&read_text(&meta_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
        if m.n_points != table.values.len() {
            return Err(Error::Config(format!(
                "{} records {} points but the CSV has {}",
                meta_path.display(),
                m.n_points,
                table.values.len()
            )));
        }
        Some(m)
    } else {
        None
    };
    Ok(FieldDataset {
        locations: table.locations,
        values_db: table.values,
        sim: meta.as_ref().and_then(|m| m.sim.clone()),
        kind: meta.map(|m| m.kind).unwrap_or(DatasetKind::Sensor),
    })
}

/// Grid CSV of predictive means (offset applied by the caller) and
/// variances.
pub fn write_prediction<T: Real>(path: &Path, locations: &[Point<T>], pred: &Prediction<T>) -> Result<()> {
    write_text(path, &dataset_csv(locations, &pred.mean, Some(&pred.variance)))
}

pub fn read_prediction<T: Real>(path: &Path) -> Result<CsvTable<T>> {
    parse_csv(path, &read_text(path)?)
}

/// Room, grid and sensor layout; every section and key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub room: RoomConfig,
    pub grid: GridSpec,
    pub sensors: SensorArray,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        self.grid.shape()?;
        self.sensors.validate(&self.room)
    }
}

pub fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let cfg: SceneConfig =
        toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: KernelFamily,
    /// Natural-domain values keyed by parameter name.
    pub params: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanSection {
    pub mode: MeanMode,
    #[serde(default)]
    pub centers: Vec<[f64; 2]>,
    #[serde(default)]
    pub prior_mean: Vec<f64>,
    #[serde(default)]
    pub prior_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training data the model conditions on, relative to the model file
    /// or absolute.
    pub path: String,
    pub n_points: usize,
    /// When set, only this seeded random subset of the rows was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Subsample>,
    /// Constant subtracted from the observations before fitting.
    pub offset_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestartSection {
    pub id: usize,
    pub start: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationSection {
    pub seed: u64,
    pub best_objective: f64,
    pub best_restart: usize,
    #[serde(default)]
    pub restart: Vec<RestartSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub kernel: KernelSection,
    pub mean: MeanSection,
    pub data: DataSection,
    pub log_marginal_likelihood: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationSection>,
}

const MODEL_DIGITS: usize = 12;

fn r12(v: f64) -> f64 {
    round_sig(v, MODEL_DIGITS)
}

impl KernelSection {
    pub fn from_spec<T: Real>(k: &KernelSpec<T>) -> Self {
        let mut params = toml::Table::new();
        for (name, v) in k.family.param_names().into_iter().zip(k.hyper.natural()) {
            params.insert(name, toml::Value::Float(r12(v.to_f64_lossy())));
        }
        KernelSection { family: k.family, params }
    }

    pub fn to_spec<T: Real>(&self) -> Result<KernelSpec<T>> {
        let names = self.family.param_names();
        if let Some(extra) = self.params.keys().find(|k| !names.contains(k)) {
            return Err(Error::Config(format!("unknown {} parameter '{extra}'", self.family)));
        }
        let values = names
            .iter()
            .map(|n| match self.params.get(n) {
                Some(toml::Value::Float(v)) => Ok(T::lit(*v)),
                Some(toml::Value::Integer(v)) => Ok(T::lit(*v as f64)),
                Some(_) => Err(Error::Config(format!("parameter '{n}' is not a number"))),
                None => Err(Error::Config(format!("missing {} parameter '{n}'", self.family))),
            })
            .collect::<Result<Vec<T>>>()?;
        KernelSpec::new(self.family, HyperParams::from_natural(self.family, &values)?)
    }
}

impl MeanSection {
    pub fn from_spec<T: Real>(m: &MeanSpec<T>) -> Self {
        let k = m.n_basis();
        MeanSection {
            mode: m.mode,
            centers: m.centers.iter().map(|p| [r12(p.x.to_f64_lossy()), r12(p.y.to_f64_lossy())]).collect(),
            prior_mean: m.prior_mean.iter().map(|v| r12(v.to_f64_lossy())).collect(),
            prior_cov: (0..k).map(|i| (0..k).map(|j| r12(m.prior_cov[(i, j)].to_f64_lossy())).collect()).collect(),
        }
    }

    pub fn to_spec<T: Real>(&self) -> Result<MeanSpec<T>> {
        let spec = match self.mode {
            MeanMode::Zero => MeanSpec::zero(),
            MeanMode::Basis => {
                let k = self.centers.len();
                if self.prior_cov.len() != k || self.prior_cov.iter().any(|r| r.len() != k) {
                    return Err(Error::Config(format!("mean prior_cov must be {k}×{k}")));
                }
                MeanSpec {
                    mode: MeanMode::Basis,
                    centers: self.centers.iter().map(|c| Point::new(T::lit(c[0]), T::lit(c[1]))).collect(),
                    prior_mean: self.prior_mean.iter().map(|&v| T::lit(v)).collect(),
                    prior_cov: Mat::from_fn(k, k, |i, j| T::lit(self.prior_cov[i][j])),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl OptimizationSection {
    pub fn from_result<T: Real>(r: &OptResult<T>) -> Self {
        OptimizationSection {
            seed: r.seed,
            best_objective: r.best_objective.to_f64_lossy(),
            best_restart: r.best_restart,
            restart: r
                .restarts
                .iter()
                .map(|t| RestartSection {
                    id: t.id,
                    start: t.start.clone(),
                    iterations: t.iterations,
                    converged: t.converged,
                    initial_objective: t.initial_objective,
                    final_objective: t.final_objective,
                    grad_norm: t.grad_norm,
                    error: t.error.clone(),
                })
                .collect(),
        }
    }
}

impl ModelFile {
    /// Resolves the data path against the directory of `model_path`.
    pub fn data_path(&self, model_path: &Path) -> PathBuf {
        let p = Path::new(&self.data.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            model_path.parent().unwrap_or(Path::new("")).join(p)
        }
    }
}

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    let text = toml::to_string(model).map_err(|e| Error::Config(format!("serialising model: {e}")))?;
    write_text(path, &text)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    if !path.exists() {
        return Err(Error::Config(format!("model file {} does not exist; run `train` first", path.display())));
    }
    toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_sim::generate_dataset;
    use crate::geometry::SourceSpec;
    use tempfile::tempdir;

    #[test]
    fn significant_digit_rounding() {
        assert_eq!(round_sig(1.234567891234, 9), 1.23456789);
        assert_eq!(round_sig(-0.000123456789123, 9), -0.000123456789);
        assert_eq!(fmt9(0.1), "0.1");
        assert_eq!(fmt9(-41.25), "-41.25");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let cfg = SimConfig::new(SourceSpec::canonical(2).unwrap(), 3);
        let pts = vec![Point::new(0.1, 0.2), Point::new(1.5, 4.9), Point::new(3.3, 0.7)];
        let ds = generate_dataset(&cfg, &pts, true, DatasetKind::Train).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back: FieldDataset<f64> = read_dataset(&path).unwrap();
        assert_eq!(back.sim, ds.sim);
        assert_eq!(back.kind, DatasetKind::Train);
        for (a, b) in back.values_db.iter().zip(&ds.values_db) {
            assert_eq!(*a, round_sig(*b, 9));
        }
        // a second write of the parsed data is byte-identical
        let p2 = dir.path().join("e.csv");
        write_dataset(&p2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn crlf_and_lf_parse_identically() {
        let lf = "x,y,value_db\n0.1,0.2,-40.5\n1,2,3\n";
        let crlf = lf.replace('\n', "\r\n");
        let p = Path::new("t.csv");
        assert_eq!(parse_csv::<f64>(p, lf).unwrap(), parse_csv::<f64>(p, &crlf).unwrap());
    }

    #[test]
    fn header_is_enforced() {
        let e = parse_csv::<f64>(Path::new("t.csv"), "y,x,value_db\n1,2,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let p = Path::new("t.csv");
        let e = parse_csv::<f64>(p, "x,y,value_db\n1,2,3\n\n1,2\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        let e = parse_csv::<f64>(p, "x,y,value_db\n1,2,abc\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_csv::<f64>(p, "x,y,value_db\n1,2,NaN\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(parse_csv::<f64>(p, "x,y,value_db\n").is_err());
    }

    #[test]
    fn kernel_section_round_trip() {
        for family in KernelFamily::ALL {
            let mut k = KernelSpec::<f64>::default_for(family);
            k.hyper.log_signal_var = 0.3;
            let sec = KernelSection::from_spec(&k);
            let back: KernelSpec<f64> = sec.to_spec().unwrap();
            for (a, b) in back.hyper.natural().iter().zip(k.hyper.natural()) {
                assert!((a - b).abs() <= 1e-11 * b.abs(), "{family}");
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.toml");
        let mf = ModelFile {
            kernel: KernelSection::from_spec(&KernelSpec::<f64>::default_for(KernelFamily::Matern32)),
            mean: MeanSection::from_spec(&MeanSpec::<f64>::basis_default()),
            data: DataSection {
                path: "d.csv".into(),
                n_points: 10,
                subsample: Some(Subsample { size: 4, seed: 9 }),
                offset_db: -3.5,
            },
            log_marginal_likelihood: -12.25,
            optimization: None,
        };
        write_model(&path, &mf).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back, mf);
        assert_eq!(back.mean.to_spec::<f64>().unwrap(), MeanSpec::basis_default());
        assert_eq!(back.data_path(&path), dir.path().join("d.csv"));
        assert!(read_model(&dir.path().join("missing.toml")).is_err());
    }

    #[test]
    fn scene_config_defaults_and_unknown_keys() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[room]\nwidth_m = 6.0\n").unwrap();
        let c = read_scene_config(&p).unwrap();
        assert_eq!(c.room.width_m, 6.0);
        assert_eq!(c.room.depth_m, 5.0);
        assert_eq!(c.grid, GridSpec::default());
        fs::write(&p, "[room]\nwidht_m = 6.0\n").unwrap();
        assert!(read_scene_config(&p).is_err());
    }
}
