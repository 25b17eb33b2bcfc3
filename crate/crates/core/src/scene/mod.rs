//! Raster and plot data model.
//!
//! Reflectance is held as unit reflectance in `[0, 1]`, stored internally as
//! integer digital numbers (`DN = reflectance * 10000`), which is also the
//! scaling of the on-disk grids. Cells whose `valid` flag is false must never
//! be read; in debug builds their band values are overwritten with
//! [`POISON_DN`] so that any accidental read surfaces as an out-of-range value.

mod gaps;
pub mod io;
mod polygon;
mod resample;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaps::{gap_statistics, observed_dates, GapReport, GapSummary, PlotGaps, SensorGaps};
pub use polygon::{rasterize_plot, Polygon, Rasterized};
pub use resample::{cubic_kernel, upsample_cubic, CUBIC_A};

/// Scale between on-disk digital numbers and unit reflectance.
pub const DN_SCALE: f64 = 10_000.0;

/// Marker written over masked band values in debug builds. It decodes to a
/// reflectance of 6.5535, far outside the valid range.
pub const POISON_DN: u16 = u16::MAX;

/// Largest DN that still decodes to a valid reflectance.
pub const MAX_DN: u16 = 10_000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("plot polygon covers no cell centre (empty plot)")]
    EmptyPlot,
    #[error("plot polygon is not simple: edges {0} and {1} intersect")]
    NotSimple(usize, usize),
    #[error("plot polygon extends outside the grid extent")]
    OutsideGrid,
    #[error("grids are not aligned: {0}")]
    Misaligned(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("observation for sensor {sensor} on {date} is missing band {band}")]
    MissingBand {
        sensor: Sensor,
        date: NaiveDate,
        band: Band,
    },
    #[error("observations must have strictly increasing dates; {0} appears twice")]
    DuplicateDate(NaiveDate),
    #[error("cube mixes sensors {0} and {1}")]
    MixedSensors(Sensor, Sensor),
    #[error("malformed WKT polygon: {0}")]
    Wkt(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Acquisition platform. `A` is the four-band, roughly daily 3 m sensor; `B`
/// is the weekly-class sensor with red-edge and short-wave infrared bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sensor {
    A,
    B,
}

impl Sensor {
    pub const ALL: [Sensor; 2] = [Sensor::A, Sensor::B];

    /// Bands carried by the sensor, in storage order.
    pub fn bands(self) -> &'static [Band] {
        match self {
            Sensor::A => &[Band::Blue, Band::Green, Band::Red, Band::Nir],
            Sensor::B => &Band::ALL,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Sensor::A => "A",
            Sensor::B => "B",
        }
    }

    pub fn band_slot(self, band: Band) -> Option<usize> {
        self.bands().iter().position(|&b| b == band)
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Sensor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Sensor::A),
            "B" | "b" => Ok(Sensor::B),
            other => Err(format!("unknown sensor {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Blue,
    Green,
    Red,
    RedEdge1,
    RedEdge2,
    RedEdge3,
    Nir,
    Swir1,
    Swir2,
}

impl Band {
    pub const ALL: [Band; 9] = [
        Band::Blue,
        Band::Green,
        Band::Red,
        Band::RedEdge1,
        Band::RedEdge2,
        Band::RedEdge3,
        Band::Nir,
        Band::Swir1,
        Band::Swir2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Band::Blue => "blue",
            Band::Green => "green",
            Band::Red => "red",
            Band::RedEdge1 => "rededge1",
            Band::RedEdge2 => "rededge2",
            Band::RedEdge3 => "rededge3",
            Band::Nir => "nir",
            Band::Swir1 => "swir1",
            Band::Swir2 => "swir2",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Band::ALL
            .iter()
            .copied()
            .find(|b| b.name() == lower)
            .ok_or_else(|| format!("unknown band {s:?}"))
    }
}

/// Georeferenced raster layout. Row 0 is the northern-most row; `xll`/`yll`
/// give the lower-left corner of the lower-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl GridGeometry {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64) -> Self {
        GridGeometry {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
        }
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.ncols, index % self.ncols)
    }

    pub fn x_max(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cellsize
    }

    pub fn y_max(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cellsize
    }

    /// Map coordinates of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    /// Cell footprint as `(xmin, ymin, xmax, ymax)`.
    pub fn cell_bounds(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let x0 = self.xll + col as f64 * self.cellsize;
        let y0 = self.yll + (self.nrows - row - 1) as f64 * self.cellsize;
        (x0, y0, x0 + self.cellsize, y0 + self.cellsize)
    }

    pub fn aligned_with(&self, other: &GridGeometry) -> bool {
        let tol = 1e-6 * self.cellsize.max(other.cellsize);
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.xll - other.xll).abs() <= tol
            && (self.yll - other.yll).abs() <= tol
            && (self.cellsize - other.cellsize).abs() <= tol
    }
}

/// Single-band floating-point raster with a validity mask. Used for file IO,
/// cloud probabilities and resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Raster {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Self {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Raster {
            geometry,
            values,
            valid,
        }
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Self {
        Raster::new(geometry, vec![value; geometry.len()])
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.geometry.index(row, col);
        self.valid[i].then_some(self.values[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Burned,
    NotBurned,
    Unlabeled,
}

impl Label {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::Burned => Some(true),
            Label::NotBurned => Some(false),
            Label::Unlabeled => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Burned => "burned",
            Label::NotBurned => "not_burned",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "burned" => Ok(Label::Burned),
            "not_burned" => Ok(Label::NotBurned),
            "unlabeled" | "" => Ok(Label::Unlabeled),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Treatment,
    Control,
    None,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Treatment => "treatment",
            Group::Control => "control",
            Group::None => "none",
        }
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "treatment" => Ok(Group::Treatment),
            "control" => Ok(Group::Control),
            "none" | "" => Ok(Group::None),
            other => Err(format!("unknown group {other:?}")),
        }
    }
}

/// A plot's identity and ground truth, without geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlotAttributes {
    pub id: String,
    pub label: Label,
    pub group: Group,
}

/// A field polygon and the grid cells it owns.
#[derive(Clone, Debug)]
pub struct Plot {
    pub id: String,
    pub polygon: Polygon,
    /// Cells whose centre lies inside the polygon, ascending.
    pub pixels: Vec<usize>,
    /// Subset of `pixels` whose footprint touches the polygon boundary, ascending.
    pub border_pixels: Vec<usize>,
    pub label: Label,
    pub group: Group,
}

impl Plot {
    pub fn new(
        id: impl Into<String>,
        polygon: Polygon,
        geometry: &GridGeometry,
        label: Label,
        group: Group,
    ) -> Result<Self, SceneError> {
        let Rasterized {
            pixels,
            border_pixels,
        } = rasterize_plot(&polygon, geometry)?;
        Ok(Plot {
            id: id.into(),
            polygon,
            pixels,
            border_pixels,
            label,
            group,
        })
    }

    pub fn attributes(&self) -> PlotAttributes {
        PlotAttributes {
            id: self.id.clone(),
            label: self.label,
            group: self.group,
        }
    }

    pub fn is_border(&self, cell: usize) -> bool {
        self.border_pixels.binary_search(&cell).is_ok()
    }

    pub fn interior_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.pixels.iter().copied().filter(|&c| !self.is_border(c))
    }

    /// True when at least half of the plot's pixels are valid in `obs`.
    pub fn observed_in(&self, obs: &BandObservation) -> bool {
        let valid = self.pixels.iter().filter(|&&c| obs.is_valid(c)).count();
        2 * valid >= self.pixels.len() && !self.pixels.is_empty()
    }
}

/// One sensor's acquisition on one date, all bands on the common grid.
#[derive(Clone, Debug)]
pub struct BandObservation {
    sensor: Sensor,
    date: NaiveDate,
    geometry: GridGeometry,
    /// DN planes in `sensor.bands()` order.
    bands: Vec<Vec<u16>>,
    valid: Vec<bool>,
}

#[inline]
fn to_dn(reflectance: f64) -> Option<u16> {
    if reflectance.is_finite() && (0.0..=1.0).contains(&reflectance) {
        Some((reflectance * DN_SCALE).round() as u16)
    } else {
        None
    }
}

impl BandObservation {
    /// Builds an observation from unit-reflectance planes (one per sensor band,
    /// in `sensor.bands()` order). Non-finite or out-of-range values mark the
    /// cell invalid.
    pub fn from_reflectance(
        sensor: Sensor,
        date: NaiveDate,
        geometry: GridGeometry,
        planes: Vec<Vec<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self, SceneError> {
        let mut valid = valid;
        check_planes(sensor, date, &geometry, planes.len(), &valid)?;
        let mut bands = Vec::with_capacity(planes.len());
        for plane in &planes {
            if plane.len() != geometry.len() {
                return Err(SceneError::Misaligned(format!(
                    "band plane has {} cells, grid has {}",
                    plane.len(),
                    geometry.len()
                )));
            }
            let mut dn = Vec::with_capacity(plane.len());
            for (cell, &v) in plane.iter().enumerate() {
                match to_dn(v) {
                    Some(d) => dn.push(d),
                    None => {
                        valid[cell] = false;
                        dn.push(0);
                    }
                }
            }
            bands.push(dn);
        }
        let mut obs = BandObservation {
            sensor,
            date,
            geometry,
            bands,
            valid,
        };
        obs.poison_invalid();
        Ok(obs)
    }

    /// Builds an observation from DN planes. DNs above [`MAX_DN`] mark the cell
    /// invalid.
    pub fn from_dn(
        sensor: Sensor,
        date: NaiveDate,
        geometry: GridGeometry,
        bands: Vec<Vec<u16>>,
        valid: Vec<bool>,
    ) -> Result<Self, SceneError> {
        let mut valid = valid;
        check_planes(sensor, date, &geometry, bands.len(), &valid)?;
        for plane in &bands {
            if plane.len() != geometry.len() {
                return Err(SceneError::Misaligned(format!(
                    "band plane has {} cells, grid has {}",
                    plane.len(),
                    geometry.len()
                )));
            }
            for (cell, &d) in plane.iter().enumerate() {
                if d > MAX_DN {
                    valid[cell] = false;
                }
            }
        }
        let mut obs = BandObservation {
            sensor,
            date,
            geometry,
            bands,
            valid,
        };
        obs.poison_invalid();
        Ok(obs)
    }

    fn poison_invalid(&mut self) {
        if cfg!(debug_assertions) {
            for (cell, ok) in self.valid.iter().enumerate() {
                if !ok {
                    for plane in &mut self.bands {
                        plane[cell] = POISON_DN;
                    }
                }
            }
        }
    }

    pub fn sensor(&self) -> Sensor {
        self.sensor
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, cell: usize) -> bool {
        self.valid[cell]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Reflectance of `band` at `cell`, or `None` when the cell is masked or the
    /// sensor lacks the band.
    #[inline]
    pub fn reflectance(&self, band: Band, cell: usize) -> Option<f64> {
        if !self.valid[cell] {
            return None;
        }
        let slot = self.sensor.band_slot(band)?;
        let dn = self.bands[slot][cell];
        debug_assert!(dn <= MAX_DN, "masked value read at cell {cell}");
        Some(f64::from(dn) / DN_SCALE)
    }

    /// All bands of a valid cell.
    pub fn band_values(&self, cell: usize) -> Option<crate::indices::BandValues> {
        if !self.valid[cell] {
            return None;
        }
        let mut out = crate::indices::BandValues::default();
        for (slot, &band) in self.sensor.bands().iter().enumerate() {
            let dn = self.bands[slot][cell];
            debug_assert!(dn <= MAX_DN, "masked value read at cell {cell}");
            out.set(band, f64::from(dn) / DN_SCALE);
        }
        Some(out)
    }

    /// Marks `cell` invalid.
    pub fn invalidate(&mut self, cell: usize) {
        self.valid[cell] = false;
        if cfg!(debug_assertions) {
            for plane in &mut self.bands {
                plane[cell] = POISON_DN;
            }
        }
    }

    /// Raw DN plane of a band. Masked cells hold arbitrary values (the poison
    /// marker in debug builds).
    pub fn dn_plane(&self, band: Band) -> Option<&[u16]> {
        self.sensor.band_slot(band).map(|s| self.bands[s].as_slice())
    }
}

fn check_planes(
    sensor: Sensor,
    date: NaiveDate,
    geometry: &GridGeometry,
    n_planes: usize,
    valid: &[bool],
) -> Result<(), SceneError> {
    if n_planes != sensor.bands().len() {
        let band = sensor.bands()[n_planes.min(sensor.bands().len() - 1)];
        return Err(SceneError::MissingBand { sensor, date, band });
    }
    if valid.len() != geometry.len() {
        return Err(SceneError::Misaligned(format!(
            "mask has {} cells, grid has {}",
            valid.len(),
            geometry.len()
        )));
    }
    Ok(())
}

/// Sets `valid = false` wherever the cloud probability is at or above
/// `threshold` (or is itself missing).
pub fn apply_mask(
    obs: &BandObservation,
    cloud_probability: &Raster,
    threshold: f64,
) -> Result<BandObservation, SceneError> {
    if !obs.geometry.aligned_with(&cloud_probability.geometry) {
        return Err(SceneError::Misaligned(
            "cloud probability grid does not match observation grid".into(),
        ));
    }
    let mut out = obs.clone();
    for cell in 0..out.geometry.len() {
        let masked = !cloud_probability.valid[cell] || cloud_probability.values[cell] >= threshold;
        if masked && out.valid[cell] {
            out.invalidate(cell);
        }
    }
    Ok(out)
}

/// Time-ordered stack of one sensor's observations on a shared grid.
#[derive(Clone, Debug)]
pub struct SceneCube {
    sensor: Sensor,
    geometry: GridGeometry,
    observations: Vec<BandObservation>,
}

impl SceneCube {
    /// Sorts `observations` by date. Fails on duplicate dates, mixed sensors
    /// or mismatched grids.
    pub fn new(
        sensor: Sensor,
        geometry: GridGeometry,
        mut observations: Vec<BandObservation>,
    ) -> Result<Self, SceneError> {
        observations.sort_by_key(|o| o.date);
        for pair in observations.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(SceneError::DuplicateDate(pair[0].date));
            }
        }
        for obs in &observations {
            if obs.sensor != sensor {
                return Err(SceneError::MixedSensors(sensor, obs.sensor));
            }
            if !obs.geometry.aligned_with(&geometry) {
                return Err(SceneError::Misaligned(format!(
                    "observation {} is not on the cube grid",
                    obs.date
                )));
            }
        }
        Ok(SceneCube {
            sensor,
            geometry,
            observations,
        })
    }

    pub fn sensor(&self) -> Sensor {
        self.sensor
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn observations(&self) -> &[BandObservation] {
        &self.observations
    }

    pub fn observations_mut(&mut self) -> &mut [BandObservation] {
        &mut self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.observations.iter().map(|o| o.date).collect()
    }

    /// Number of observations with at least one valid cell.
    pub fn valid_observation_count(&self) -> usize {
        self.observations
            .iter()
            .filter(|o| o.valid.iter().any(|v| *v))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 10, d).unwrap()
    }

    fn obs(prob_cells: usize, d: u32) -> BandObservation {
        let g = GridGeometry::new(prob_cells, 1, 0.0, 0.0, 3.0);
        let planes = vec![vec![0.2; g.len()]; 4];
        BandObservation::from_reflectance(Sensor::A, date(d), g, planes, vec![true; g.len()])
            .unwrap()
    }

    #[test]
    fn mask_all_zero_probability_keeps_mask() {
        let o = obs(6, 1);
        let p = Raster::filled(*o.geometry(), 0.0);
        let m = apply_mask(&o, &p, 0.5).unwrap();
        assert_eq!(m.valid_count(), 6);
    }

    #[test]
    fn mask_all_one_probability_invalidates_all() {
        let o = obs(6, 1);
        let p = Raster::filled(*o.geometry(), 1.0);
        let m = apply_mask(&o, &p, 0.5).unwrap();
        assert_eq!(m.valid_count(), 0);
        assert!(m.reflectance(Band::Red, 0).is_none());
    }

    #[test]
    fn mask_counts_cells_at_or_above_threshold() {
        let o = obs(8, 1);
        let probs = vec![0.1, 0.5, 0.49, 0.9, 0.0, 0.51, 0.3, 1.0];
        let expected = probs.iter().filter(|p| **p >= 0.5).count();
        let p = Raster::new(*o.geometry(), probs);
        let m = apply_mask(&o, &p, 0.5).unwrap();
        assert_eq!(o.valid_count() - m.valid_count(), expected);
    }

    #[test]
    fn mask_rejects_misaligned_grid() {
        let o = obs(6, 1);
        let p = Raster::filled(GridGeometry::new(5, 1, 0.0, 0.0, 3.0), 0.0);
        assert!(matches!(
            apply_mask(&o, &p, 0.5),
            Err(SceneError::Misaligned(_))
        ));
    }

    #[test]
    fn cube_sorts_and_rejects_duplicates() {
        let g = *obs(4, 1).geometry();
        let cube = SceneCube::new(Sensor::A, g, vec![obs(4, 5), obs(4, 2), obs(4, 9)]).unwrap();
        assert_eq!(cube.dates(), vec![date(2), date(5), date(9)]);
        assert!(matches!(
            SceneCube::new(Sensor::A, g, vec![obs(4, 5), obs(4, 5)]),
            Err(SceneError::DuplicateDate(_))
        ));
    }

    #[test]
    fn out_of_range_reflectance_is_invalid() {
        let g = GridGeometry::new(3, 1, 0.0, 0.0, 3.0);
        let mut planes = vec![vec![0.2; 3]; 4];
        planes[2][1] = 1.2;
        planes[0][2] = f64::NAN;
        let o = BandObservation::from_reflectance(Sensor::A, date(1), g, planes, vec![true; 3])
            .unwrap();
        assert_eq!(o.valid_mask(), &[true, false, false]);
    }

    #[test]
    fn missing_band_is_reported() {
        let g = GridGeometry::new(3, 1, 0.0, 0.0, 3.0);
        let err = BandObservation::from_reflectance(
            Sensor::A,
            date(1),
            g,
            vec![vec![0.1; 3]; 3],
            vec![true; 3],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SceneError::MissingBand {
                band: Band::Nir,
                ..
            }
        ));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn masked_cells_are_poisoned_in_debug() {
        let mut o = obs(4, 1);
        o.invalidate(2);
        assert_eq!(o.dn_plane(Band::Red).unwrap()[2], POISON_DN);
    }
}
