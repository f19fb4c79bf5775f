//! Room, evaluation grid, sensor and source layout.
//!
//! Configuration structs are plain `f64` (they are read from files); the
//! point type and distance routines are generic over [`Real`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point<T>) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist2(&self, other: &Point<T>) -> T {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }

    pub fn coords(&self) -> [T; 2] {
        [self.x, self.y]
    }

    pub fn cast<U: Real>(&self) -> Point<U> {
        Point { x: U::lit(self.x.to_f64_lossy()), y: U::lit(self.y.to_f64_lossy()) }
    }
}

impl<T: Real> From<(f64, f64)> for Point<T> {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x: T::lit(x), y: T::lit(y) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConfig {
    pub width_m: f64,
    pub depth_m: f64,
    pub height_m: f64,
    pub rel_permittivity: f64,
    /// Carried for completeness; the image-source model does not use it.
    pub conductivity: f64,
    pub frequency_hz: f64,
    pub attenuation_exponent: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            width_m: 5.0,
            depth_m: 5.0,
            height_m: 2.5,
            rel_permittivity: 5.0,
            conductivity: 0.001,
            frequency_hz: 9.0e8,
            attenuation_exponent: 2.0,
        }
    }
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.width_m, self.depth_m, self.height_m];
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Config(format!("room dimensions must be positive, got {dims:?}")));
        }
        if !(self.rel_permittivity >= 1.0) {
            return Err(Error::Config(format!(
                "rel_permittivity must be >= 1, got {}",
                self.rel_permittivity
            )));
        }
        if !(self.frequency_hz > 0.0) {
            return Err(Error::Config(format!("frequency_hz must be > 0, got {}", self.frequency_hz)));
        }
        if !(self.conductivity >= 0.0) || !(self.attenuation_exponent > 0.0) {
            return Err(Error::Config("conductivity must be >= 0 and attenuation_exponent > 0".into()));
        }
        Ok(())
    }

    /// Normal-incidence Fresnel reflection magnitude `(√εr − 1)/(√εr + 1)`.
    pub fn reflection_coefficient(&self) -> f64 {
        let n = self.rel_permittivity.sqrt();
        (n - 1.0) / (n + 1.0)
    }

    pub fn wavelength_m(&self) -> f64 {
        299_792_458.0 / self.frequency_hz
    }

    pub fn contains_strictly<T: Real>(&self, p: &Point<T>) -> bool {
        let (x, y) = (p.x.to_f64_lossy(), p.y.to_f64_lossy());
        x > 0.0 && x < self.width_m && y > 0.0 && y < self.depth_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_start: f64,
    pub x_end: f64,
    pub y_start: f64,
    pub y_end: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { x_start: 0.1, x_end: 4.9, y_start: 0.1, y_end: 4.9, step: 0.1 }
    }
}

const GRID_TOL: f64 = 1e-9;

impl GridSpec {
    pub fn with_step(step: f64) -> Self {
        GridSpec { step, ..Default::default() }
    }

    fn axis_count(start: f64, end: f64, step: f64, axis: &str) -> Result<usize> {
        if !(start.is_finite() && end.is_finite()) || end < start {
            return Err(Error::Config(format!("grid {axis} range [{start}, {end}] is invalid")));
        }
        if end == start {
            return Ok(1);
        }
        if !(step > 0.0) {
            return Err(Error::Config(format!("grid step must be > 0, got {step}")));
        }
        let n = (end - start) / step;
        let r = n.round();
        if (n - r).abs() > GRID_TOL {
            return Err(Error::Config(format!(
                "grid {axis} range [{start}, {end}] is not an integral number of steps of {step}"
            )));
        }
        Ok(r as usize + 1)
    }

    /// `(nx, ny)`.
    pub fn shape(&self) -> Result<(usize, usize)> {
        Ok((
            Self::axis_count(self.x_start, self.x_end, self.step, "x")?,
            Self::axis_count(self.y_start, self.y_end, self.step, "y")?,
        ))
    }

    pub fn len(&self) -> Result<usize> {
        self.shape().map(|(nx, ny)| nx * ny)
    }
}

/// Snaps `start + i·step` to 12 decimals so grid nodes land exactly on the
/// decimal coordinates used for sensors and sources.
fn axis_value(start: f64, step: f64, i: usize) -> f64 {
    let v = start + i as f64 * step;
    (v * 1e12).round() / 1e12
}

/// Grid nodes in row-major order with `y` varying fastest.
pub fn make_grid<T: Real>(spec: &GridSpec) -> Result<Vec<Point<T>>> {
    let (nx, ny) = spec.shape()?;
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        let x = axis_value(spec.x_start, spec.step, i);
        for j in 0..ny {
            let y = axis_value(spec.y_start, spec.step, j);
            out.push(Point::from((x, y)));
        }
    }
    Ok(out)
}

/// `D[i][j] = |a_i − b_j|`.
pub fn pairwise_dist<T: Real>(a: &[Point<T>], b: &[Point<T>]) -> Mat<T> {
    Mat::from_fn(a.len(), b.len(), |i, j| a[i].dist(&b[j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub positions: Vec<Point<f64>>,
    pub ids: Vec<i32>,
}

impl Default for SensorArray {
    /// 3×3 layout at x, y ∈ {1.0, 2.5, 4.0}, ids 1..=9.
    fn default() -> Self {
        let axis = [1.0, 2.5, 4.0];
        let positions: Vec<Point<f64>> =
            axis.iter().flat_map(|&x| axis.iter().map(move |&y| Point::new(x, y))).collect();
        let ids = (1..=positions.len() as i32).collect();
        SensorArray { positions, ids }
    }
}

impl SensorArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, room: &RoomConfig) -> Result<()> {
        if self.positions.len() != self.ids.len() {
            return Err(Error::Config("sensor ids and positions differ in length".into()));
        }
        for (k, p) in self.positions.iter().enumerate() {
            if !room.contains_strictly(p) {
                return Err(Error::Config(format!(
                    "sensor {} at ({}, {}) is not strictly inside the room",
                    self.ids[k], p.x, p.y
                )));
            }
        }
        let mut seen = self.ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("sensor ids are not unique".into()));
        }
        Ok(())
    }

    pub fn position_of(&self, id: i32) -> Option<Point<f64>> {
        self.ids.iter().position(|&i| i == id).map(|k| self.positions[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// 1-based catalogue index.
    pub index: usize,
    pub position: Point<f64>,
}

/// Canonical source positions, indices 1..=16 in this order.
pub const SOURCE_POSITIONS: [(f64, f64); 16] = [
    (1.0, 1.0),
    (4.0, 4.0),
    (1.0, 4.0),
    (4.0, 1.0),
    (2.5, 2.5),
    (1.0, 2.5),
    (4.0, 2.5),
    (2.5, 1.0),
    (2.5, 4.0),
    (2.0, 2.0),
    (3.0, 3.0),
    (2.0, 3.0),
    (3.0, 2.0),
    (0.5, 0.5),
    (4.5, 4.5),
    (0.5, 4.5),
];

impl SourceSpec {
    /// Looks up a canonical source by its 1-based index.
    pub fn canonical(index: usize) -> Result<Self> {
        if !(1..=SOURCE_POSITIONS.len()).contains(&index) {
            return Err(Error::Config(format!("source index must be in 1..=16, got {index}")));
        }
        let (x, y) = SOURCE_POSITIONS[index - 1];
        Ok(SourceSpec { index, position: Point::new(x, y) })
    }

    pub fn all() -> Vec<SourceSpec> {
        (1..=SOURCE_POSITIONS.len()).map(|i| Self::canonical(i).unwrap()).collect()
    }
}

pub fn canonical_source_points<T: Real>() -> Vec<Point<T>> {
    SOURCE_POSITIONS.iter().map(|&p| Point::from(p)).collect()
}
