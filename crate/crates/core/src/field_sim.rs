//! Synthetic field generator: free-space path loss from the source plus
//! image sources for wall reflections, summed in power.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, RoomConfig, SourceSpec};
use crate::scalar::Real;

pub const MAX_REFLECTION_ORDER: usize = 3;

/// Received level never drops below this, in dB.
pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub room: RoomConfig,
    pub source: SourceSpec,
    pub max_reflections: usize,
    pub tx_power_dbm: f64,
    pub noise_std_db: f64,
    pub rng_seed: u64,
    /// Distances shorter than this are clamped to it. Unset means one
    /// carrier wavelength, where the far-field path loss model starts to
    /// hold. Zero disables the clamp, in which case a point on an image
    /// source is a singularity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_field_radius_m: Option<f64>,
}


impl SimConfig {
    pub fn new(source: SourceSpec, rng_seed: u64) -> Self {
        SimConfig {
            room: RoomConfig::default(),
            source,
            max_reflections: MAX_REFLECTION_ORDER,
            tx_power_dbm: 0.0,
            noise_std_db: 0.5,
            rng_seed,
            near_field_radius_m: None,
        }
    }

    pub fn near_field_radius(&self) -> f64 {
        self.near_field_radius_m.unwrap_or_else(|| self.room.wavelength_m())
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.max_reflections > MAX_REFLECTION_ORDER {
            return Err(Error::Config(format!(
                "max_reflections must be in 0..={MAX_REFLECTION_ORDER}, got {}",
                self.max_reflections
            )));
        }
        if !(self.noise_std_db >= 0.0) || !self.tx_power_dbm.is_finite() {
            return Err(Error::Config("noise_std_db must be >= 0 and tx_power_dbm finite".into()));
        }
        if !(self.near_field_radius() >= 0.0) {
            return Err(Error::Config("near_field_radius_m must be >= 0".into()));
        }
        if !self.room.contains_strictly(&self.source.position) {
            return Err(Error::Config(format!(
                "source {} at ({}, {}) is not strictly inside the room",
                self.source.index, self.source.position.x, self.source.position.y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Point<f64>,
    /// Product of the wall reflection coefficients along the path.
    pub coefficient: f64,
    pub reflections: usize,
}

#[derive(Debug, Clone, Copy)]
enum Wall {
    Left,
    Right,
    Bottom,
    Top,
}

const WALLS: [Wall; 4] = [Wall::Left, Wall::Right, Wall::Bottom, Wall::Top];

fn mirror(p: Point<f64>, wall: Wall, room: &RoomConfig) -> Point<f64> {
    match wall {
        Wall::Left => Point::new(-p.x, p.y),
        Wall::Right => Point::new(2.0 * room.width_m - p.x, p.y),
        Wall::Bottom => Point::new(p.x, -p.y),
        Wall::Top => Point::new(p.x, 2.0 * room.depth_m - p.y),
    }
}

fn same_position(a: &Point<f64>, b: &Point<f64>) -> bool {
    (a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9
}

/// All distinct image sources reachable with at most `order` wall
/// reflections, the real source first. A position reachable by several
/// paths keeps the shortest one.
pub fn image_sources(room: &RoomConfig, source: &SourceSpec, order: usize) -> Result<Vec<ImageSource>> {
    room.validate()?;
    if order > MAX_REFLECTION_ORDER {
        return Err(Error::Config(format!("reflection order must be <= {MAX_REFLECTION_ORDER}, got {order}")));
    }
    if !room.contains_strictly(&source.position) {
        return Err(Error::Config(format!(
            "source at ({}, {}) is outside the room",
            source.position.x, source.position.y
        )));
    }
    let gamma = room.reflection_coefficient();
    let mut images =
        vec![ImageSource { position: source.position, coefficient: 1.0, reflections: 0 }];
    let mut frontier = vec![source.position];
    for k in 1..=order {
        let mut next = Vec::new();
        for p in &frontier {
            for wall in WALLS {
                let q = mirror(*p, wall, room);
                if images.iter().any(|im| same_position(&im.position, &q)) {
                    continue;
                }
                images.push(ImageSource { position: q, coefficient: gamma.powi(k as i32), reflections: k });
                next.push(q);
            }
        }
        frontier = next;
    }
    Ok(images)
}

fn power_sum<T: Real>(cfg: &SimConfig, images: &[ImageSource], p: &Point<T>, index: usize) -> Result<T> {
    let alpha = T::lit(cfg.room.attenuation_exponent);
    let r_min = T::lit(cfg.near_field_radius());
    let mut power = T::zero();
    for im in images {
        let d = p.dist(&im.position.cast());
        if d <= T::zero() && r_min <= T::zero() {
            return Err(Error::Singularity { index });
        }
        let d = d.max(r_min);
        let c = T::lit(im.coefficient);
        power = power + c * c * d.powf(-alpha);
    }
    Ok(power)
}

fn to_db<T: Real>(cfg: &SimConfig, power: T) -> T {
    let db = T::lit(cfg.tx_power_dbm) + T::lit(10.0) * power.log10();
    db.max(T::lit(DB_FLOOR))
}

/// Noise-free received level in dB at `p`.
pub fn field_at_point<T: Real>(cfg: &SimConfig, p: &Point<T>) -> Result<T> {
    cfg.validate()?;
    let images = image_sources(&cfg.room, &cfg.source, cfg.max_reflections)?;
    Ok(to_db(cfg, power_sum(cfg, &images, p, 0)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Train,
    Truth,
    Sensor,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Train => "train",
            DatasetKind::Truth => "truth",
            DatasetKind::Sensor => "sensor",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDataset<T> {
    pub locations: Vec<Point<T>>,
    pub values_db: Vec<T>,
    pub sim: Option<SimConfig>,
    pub kind: DatasetKind,
}

impl<T: Real> FieldDataset<T> {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.len() != self.values_db.len() {
            return Err(Error::Contract("dataset locations and values differ in length".into()));
        }
        if let Some(i) = self.values_db.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("dataset value {i} is not finite")));
        }
        Ok(())
    }

    /// Rows at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        FieldDataset {
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            values_db: idx.iter().map(|&i| self.values_db[i]).collect(),
            sim: self.sim.clone(),
            kind: self.kind,
        }
    }
}

/// Evaluates the field at every location; with `noisy` each value gets an
/// independent `N(0, noise_std_db²)` draw from a generator seeded by
/// `cfg.rng_seed`.
pub fn generate_dataset<T: Real>(
    cfg: &SimConfig,
    locations: &[Point<T>],
    noisy: bool,
    kind: DatasetKind,
) -> Result<FieldDataset<T>> {
    cfg.validate()?;
    let images = image_sources(&cfg.room, &cfg.source, cfg.max_reflections)?;
    let mut values = Vec::with_capacity(locations.len());
    for (i, p) in locations.iter().enumerate() {
        values.push(to_db(cfg, power_sum(cfg, &images, p, i)?));
    }
    if noisy && cfg.noise_std_db > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let normal = Normal::new(0.0, cfg.noise_std_db)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for v in values.iter_mut() {
            *v = *v + T::lit(normal.sample(&mut rng));
        }
    }
    Ok(FieldDataset { locations: locations.to_vec(), values_db: values, sim: Some(cfg.clone()), kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_grid, GridSpec};
    use approx::assert_relative_eq;

    fn cfg(source: (f64, f64), reflections: usize) -> SimConfig {
        let mut c = SimConfig::new(SourceSpec { index: 1, position: Point::new(source.0, source.1) }, 7);
        c.max_reflections = reflections;
        c
    }

    #[test]
    fn order_zero_is_the_source() {
        let c = cfg((2.5, 2.5), 0);
        let im = image_sources(&c.room, &c.source, 0).unwrap();
        assert_eq!(im, vec![ImageSource { position: Point::new(2.5, 2.5), coefficient: 1.0, reflections: 0 }]);
    }

    #[test]
    fn order_one_adds_one_image_per_wall() {
        let c = cfg((1.0, 3.0), 1);
        let im = image_sources(&c.room, &c.source, 1).unwrap();
        assert_eq!(im.len(), 5);
        let want = [(-1.0, 3.0), (9.0, 3.0), (1.0, -3.0), (1.0, 7.0)];
        let gamma = c.room.reflection_coefficient();
        for (w, got) in want.iter().zip(&im[1..]) {
            assert_eq!(got.position, Point::new(w.0, w.1));
            assert_relative_eq!(got.coefficient, gamma);
        }
    }

    #[test]
    fn order_two_matches_sequence_enumeration() {
        // Oracle: every wall sequence of length <= 2, keep the minimum
        // reflection count per distinct position.
        let c = cfg((1.0, 1.0), 2);
        let (w, d) = (c.room.width_m, c.room.depth_m);
        let reflect = |p: (f64, f64), k: usize| match k {
            0 => (-p.0, p.1),
            1 => (2.0 * w - p.0, p.1),
            2 => (p.0, -p.1),
            _ => (p.0, 2.0 * d - p.1),
        };
        let mut oracle: Vec<((f64, f64), usize)> = vec![((1.0, 1.0), 0)];
        for a in 0..4 {
            let p1 = reflect((1.0, 1.0), a);
            oracle.push((p1, 1));
            for b in 0..4 {
                oracle.push((reflect(p1, b), 2));
            }
        }
        let mut distinct: Vec<((f64, f64), usize)> = Vec::new();
        for (p, k) in oracle {
            match distinct.iter_mut().find(|(q, _)| (q.0 - p.0).abs() < 1e-9 && (q.1 - p.1).abs() < 1e-9) {
                Some(e) => e.1 = e.1.min(k),
                None => distinct.push((p, k)),
            }
        }
        let got = image_sources(&c.room, &c.source, 2).unwrap();
        assert_eq!(got.len(), distinct.len());
        assert_eq!(got.len(), 13);
        for (p, k) in distinct {
            let m = got.iter().find(|im| same_position(&im.position, &Point::new(p.0, p.1))).unwrap();
            assert_eq!(m.reflections, k);
        }
    }

    #[test]
    fn coefficients_in_unit_interval_and_non_increasing() {
        let c = cfg((0.5, 4.5), 3);
        let im = image_sources(&c.room, &c.source, 3).unwrap();
        assert!(im.iter().all(|i| i.coefficient > 0.0 && i.coefficient <= 1.0));
        assert!(im.windows(2).all(|w| w[0].reflections <= w[1].reflections && w[0].coefficient >= w[1].coefficient));
    }

    #[test]
    fn source_outside_room_rejected() {
        let c = cfg((2.5, 2.5), 1);
        let outside = SourceSpec { index: 1, position: Point::new(5.0, 2.0) };
        assert!(matches!(image_sources(&c.room, &outside, 1), Err(Error::Config(_))));
        assert!(image_sources(&c.room, &c.source, 4).is_err());
    }

    #[test]
    fn unit_distance_is_zero_db() {
        let c = cfg((2.5, 2.5), 0);
        let v: f64 = field_at_point(&c, &Point::new(3.5, 2.5)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn doubling_distance_costs_six_db() {
        let c = cfg((1.0, 1.0), 0);
        let a: f64 = field_at_point(&c, &Point::new(1.5, 1.0)).unwrap();
        let b: f64 = field_at_point(&c, &Point::new(2.0, 1.0)).unwrap();
        assert_relative_eq!(a - b, 10.0 * 4f64.log10(), epsilon = 1e-12);
        assert_relative_eq!(a - b, 6.0206, epsilon = 1e-4);
    }

    #[test]
    fn first_order_centre_matches_hand_sum() {
        let c = cfg((1.0, 2.0), 1);
        let p = Point::new(2.5, 2.5);
        let g2 = c.room.reflection_coefficient().powi(2);
        let d2 = |x: f64, y: f64| (p.x - x).powi(2) + (p.y - y).powi(2);
        let power = 1.0 / d2(1.0, 2.0)
            + g2 / d2(-1.0, 2.0)
            + g2 / d2(9.0, 2.0)
            + g2 / d2(1.0, -2.0)
            + g2 / d2(1.0, 8.0);
        let v: f64 = field_at_point(&c, &p).unwrap();
        assert_relative_eq!(v, 10.0 * power.log10(), epsilon = 1e-12);
    }

    #[test]
    fn coincident_point_is_singular_without_clamp() {
        let mut c = cfg((2.0, 2.0), 1);
        c.near_field_radius_m = Some(0.0);
        let pts = vec![Point::new(1.0, 1.0), Point::new(2.0, 2.0)];
        match generate_dataset::<f64>(&c, &pts, false, DatasetKind::Truth) {
            Err(Error::Singularity { index }) => assert_eq!(index, 1),
            other => panic!("expected singularity, got {other:?}"),
        }
        c.near_field_radius_m = None;
        let v: f64 = field_at_point(&c, &Point::new(2.0, 2.0)).unwrap();
        assert!(v.is_finite());
        // Without reflections everything inside one wavelength reads the
        // level at one wavelength.
        let c0 = cfg((2.0, 2.0), 0);
        let lambda = c0.room.wavelength_m();
        let expect = -20.0 * lambda.log10();
        for r in [0.0, 0.5 * lambda, lambda] {
            let v: f64 = field_at_point(&c0, &Point::new(2.0 + r, 2.0)).unwrap();
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_in_distance_without_reflections() {
        let mut c = cfg((2.5, 2.5), 0);
        c.near_field_radius_m = Some(0.0);
        let mut prev = f64::INFINITY;
        for k in 1..=22 {
            let v: f64 = field_at_point(&c, &Point::new(2.5 + 0.1 * k as f64, 2.5)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn zero_noise_equals_noiseless_and_seed_is_deterministic() {
        let grid = make_grid::<f64>(&GridSpec::with_step(0.4)).unwrap();
        let mut c = cfg((1.0, 1.0), 3);
        c.noise_std_db = 0.0;
        let a = generate_dataset(&c, &grid, true, DatasetKind::Train).unwrap();
        let b = generate_dataset(&c, &grid, false, DatasetKind::Train).unwrap();
        assert_eq!(a.values_db, b.values_db);
        c.noise_std_db = 0.5;
        let x = generate_dataset(&c, &grid, true, DatasetKind::Train).unwrap();
        let y = generate_dataset(&c, &grid, true, DatasetKind::Train).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.values_db, b.values_db);
    }

    #[test]
    fn noise_variance_monte_carlo() {
        let grid = make_grid::<f64>(&GridSpec::default()).unwrap();
        let c = cfg((4.0, 4.0), 3);
        let clean = generate_dataset(&c, &grid, false, DatasetKind::Truth).unwrap();
        let noisy = generate_dataset(&c, &grid, true, DatasetKind::Train).unwrap();
        let r: Vec<f64> = noisy.values_db.iter().zip(&clean.values_db).map(|(a, b)| a - b).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        assert!((var / 0.25 - 1.0).abs() < 0.15, "sample variance {var}");
    }

    #[test]
    fn generic_over_f32() {
        let c = cfg((2.5, 2.5), 2);
        let v32: f32 = field_at_point(&c, &Point::new(1.0f32, 1.0)).unwrap();
        let v64: f64 = field_at_point(&c, &Point::new(1.0, 1.0)).unwrap();
        assert!((v32 as f64 - v64).abs() < 1e-4);
    }
}
