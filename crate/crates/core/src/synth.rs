//! Synthetic two-sensor scenes with known burn and till dates.
//!
//! Each plot follows a two-level spectral step: a pre-event level until its
//! event, a post-till level afterwards. Burned plots additionally carry a
//! char excursion towards the char spectrum that decays with a configurable
//! half-life, so burned and tilled plots become indistinguishable within days.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::io::{write_events, write_grid, write_plots, EventRecord, Manifest, ManifestEntry};
use crate::scene::{
    BandObservation, GapReport, GridGeometry, Group, Label, Plot, PlotGaps, Polygon, Raster,
    SceneCube, SceneError, Sensor, SensorGaps, DN_SCALE,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario config: {0}")]
    Toml(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-band reflectance levels in `Band::ALL` order.
pub type Spectrum = [f64; 9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    /// Standing stubble before the plot's event.
    pub pre: Spectrum,
    /// Tilled soil after the event.
    pub till: Spectrum,
    /// Fresh char on the burn date.
    pub char: Spectrum,
    /// Days for the char excursion to halve.
    pub half_life_days: f64,
    /// Standard deviation of the per-plot, per-band multiplicative factor.
    pub plot_sd: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        SignalModel {
            pre: [0.07, 0.10, 0.13, 0.17, 0.22, 0.25, 0.28, 0.33, 0.25],
            till: [0.08, 0.11, 0.14, 0.17, 0.19, 0.21, 0.22, 0.30, 0.26],
            char: [0.04, 0.045, 0.05, 0.055, 0.06, 0.065, 0.07, 0.10, 0.12],
            half_life_days: 1.5,
            plot_sd: 0.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudModel {
    /// Daily probability that an overcast spell starts on a clear day.
    pub spell_start_probability: f64,
    pub spell_min_days: u32,
    pub spell_max_days: u32,
    /// Lower bound of the clouded scene fraction during a spell; the upper bound is 1.
    pub spell_cover_min: f64,
    /// Probability that a clear-day acquisition is partly cloudy.
    pub partial_probability: f64,
    /// Covered fraction of a partly cloudy scene, drawn uniformly.
    pub partial_cover_min: f64,
    pub partial_cover_max: f64,
    /// Radius of one cloud blob in cells.
    pub blob_radius_cells: f64,
}

impl CloudModel {
    pub fn clear() -> Self {
        CloudModel {
            spell_start_probability: 0.0,
            spell_min_days: 1,
            spell_max_days: 1,
            spell_cover_min: 1.0,
            partial_probability: 0.0,
            partial_cover_min: 0.0,
            partial_cover_max: 0.0,
            blob_radius_cells: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSchedule {
    /// Days between acquisition opportunities.
    pub revisit_days: u32,
    /// Probability that an opportunity yields an acquisition.
    pub acquisition_probability: f64,
    /// Pixel noise standard deviation in reflectance.
    pub noise_sd: f64,
    /// When false the sensor sees every plot at its pre-event level.
    pub carries_signal: bool,
    pub clouds: CloudModel,
}

impl SensorSchedule {
    pub fn default_a() -> Self {
        SensorSchedule {
            revisit_days: 1,
            acquisition_probability: 0.9,
            noise_sd: 0.02,
            carries_signal: true,
            clouds: CloudModel {
                spell_start_probability: 0.08,
                spell_min_days: 3,
                spell_max_days: 6,
                spell_cover_min: 0.6,
                partial_probability: 1.0,
                partial_cover_min: 0.2,
                partial_cover_max: 0.5,
                blob_radius_cells: 12.0,
            },
        }
    }

    pub fn default_b() -> Self {
        SensorSchedule {
            revisit_days: 5,
            acquisition_probability: 1.0,
            noise_sd: 0.01,
            carries_signal: true,
            clouds: CloudModel {
                spell_start_probability: 0.0,
                spell_min_days: 2,
                spell_max_days: 5,
                spell_cover_min: 0.5,
                partial_probability: 0.8,
                partial_cover_min: 0.1,
                partial_cover_max: 0.55,
                blob_radius_cells: 12.0,
            },
        }
    }

    fn validate(&self, name: &str) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(format!("sensor {name}: {m}")));
        let c = &self.clouds;
        if self.revisit_days == 0 {
            return bad("revisit_days must be positive");
        }
        for p in [
            self.acquisition_probability,
            c.spell_start_probability,
            c.spell_cover_min,
            c.partial_probability,
            c.partial_cover_min,
            c.partial_cover_max,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities and cover fractions must lie in [0, 1]");
            }
        }
        if c.partial_cover_min > c.partial_cover_max || c.spell_min_days > c.spell_max_days || c.spell_min_days == 0 {
            return bad("cloud ranges must be non-empty");
        }
        if !(self.noise_sd >= 0.0) || !(c.blob_radius_cells > 0.0) {
            return bad("noise and blob radius must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_plots: usize,
    pub plot_area_median_ha: f64,
    pub plot_area_mean_ha: f64,
    pub cellsize_m: f64,
    /// Scene width in cells; sized to fit the plots when absent.
    pub extent_cols: Option<usize>,
    pub burn_probability: f64,
    /// Fraction of plots carrying a ground label.
    pub label_fraction: f64,
    pub treatment_fraction: f64,
    pub season_start: NaiveDate,
    pub season_days: u32,
    /// Event days (relative to the season start), inclusive.
    pub event_window_start_day: u32,
    pub event_window_end_day: u32,
    pub till_lag_min_days: u32,
    pub till_lag_max_days: u32,
    pub signal: SignalModel,
    pub sensor_a: SensorSchedule,
    pub sensor_b: SensorSchedule,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 8,
            n_plots: 300,
            plot_area_median_ha: 0.9,
            plot_area_mean_ha: 1.4,
            cellsize_m: 10.0,
            extent_cols: None,
            burn_probability: 0.75,
            label_fraction: 1.0,
            treatment_fraction: 0.5,
            season_start: NaiveDate::from_ymd_opt(2019, 10, 10).expect("valid date"),
            season_days: 66,
            event_window_start_day: 8,
            event_window_end_day: 48,
            till_lag_min_days: 1,
            till_lag_max_days: 3,
            signal: SignalModel::default(),
            sensor_a: SensorSchedule::default_a(),
            sensor_b: SensorSchedule::default_b(),
        }
    }
}

impl ScenarioConfig {
    /// Small scenario for quick runs and examples.
    pub fn compact() -> Self {
        ScenarioConfig {
            n_plots: 40,
            cellsize_m: 20.0,
            ..Default::default()
        }
    }

    pub fn schedule(&self, sensor: Sensor) -> &SensorSchedule {
        match sensor {
            Sensor::A => &self.sensor_a,
            Sensor::B => &self.sensor_b,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_plots == 0 {
            return bad("n_plots must be positive");
        }
        for p in [self.burn_probability, self.label_fraction, self.treatment_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.plot_area_median_ha > 0.0) || !(self.plot_area_mean_ha >= self.plot_area_median_ha) {
            return bad("plot area mean must be at least the (positive) median");
        }
        if !(self.cellsize_m > 0.0) {
            return bad("cellsize must be positive");
        }
        if !(self.signal.half_life_days > 0.0) || !(self.signal.plot_sd >= 0.0) {
            return bad("half-life must be positive");
        }
        for s in [&self.signal.pre, &self.signal.till, &self.signal.char] {
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad("signal levels must be reflectances in [0, 1]");
            }
        }
        if self.event_window_start_day > self.event_window_end_day
            || self.event_window_end_day >= self.season_days
            || self.till_lag_min_days > self.till_lag_max_days
        {
            return bad("event window must lie inside the season");
        }
        self.sensor_a.validate("A")?;
        self.sensor_b.validate("B")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotTruth {
    pub plot_id: String,
    pub burned: bool,
    pub burn_date: Option<NaiveDate>,
    pub till_date: NaiveDate,
    pub label: Label,
    pub group: Group,
}

impl PlotTruth {
    /// Burn date for burned plots, till date otherwise.
    pub fn event_date(&self) -> NaiveDate {
        self.burn_date.unwrap_or(self.till_date)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub plots: Vec<PlotTruth>,
    /// Dates on which each plot (by index) had at least half its pixels clear.
    pub observed: BTreeMap<Sensor, Vec<Vec<NaiveDate>>>,
}

impl GroundTruth {
    /// Gap table built from the recorded observation dates.
    pub fn gap_table(&self) -> GapReport {
        let sensors = self
            .observed
            .iter()
            .map(|(&sensor, per_plot)| {
                let rows = per_plot
                    .iter()
                    .zip(&self.plots)
                    .map(|(dates, p)| {
                        let days: Vec<i64> = dates.iter().map(|d| (*d - dates[0]).num_days()).collect();
                        PlotGaps::from_days(&p.plot_id, &days)
                    })
                    .collect();
                SensorGaps::from_plots(sensor, rows)
            })
            .collect();
        GapReport { sensors }
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.plots
            .iter()
            .map(|p| EventRecord {
                plot_id: p.plot_id.clone(),
                event_date: p.event_date(),
                burned: p.burned,
            })
            .collect()
    }

    /// Ground labels by plot id for labeled plots.
    pub fn labels(&self) -> std::collections::HashMap<String, bool> {
        self.plots
            .iter()
            .filter(|p| p.label != Label::Unlabeled)
            .map(|p| (p.plot_id.clone(), p.burned))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["plot_id", "burned", "burn_date", "till_date", "label", "group"])?;
        for p in &self.plots {
            w.write_record([
                p.plot_id.clone(),
                u8::from(p.burned).to_string(),
                p.burn_date.map_or(String::new(), |d| d.to_string()),
                p.till_date.to_string(),
                p.label.name().to_string(),
                p.group.name().to_string(),
            ])?;
        }
        w.flush().map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub geometry: GridGeometry,
    pub cube_a: SceneCube,
    pub cube_b: SceneCube,
    pub plots: Vec<Plot>,
    pub truth: GroundTruth,
}

impl Scenario {
    pub fn cube(&self, sensor: Sensor) -> &SceneCube {
        match sensor {
            Sensor::A => &self.cube_a,
            Sensor::B => &self.cube_b,
        }
    }

    fn cube_mut(&mut self, sensor: Sensor) -> &mut SceneCube {
        match sensor {
            Sensor::A => &mut self.cube_a,
            Sensor::B => &mut self.cube_b,
        }
    }
}

/// Plot rectangles in cell units: `(col0, row0, width, height)`, row 0 at the top.
struct Layout {
    rects: Vec<(usize, usize, usize, usize)>,
    ncols: usize,
    nrows: usize,
}

fn layout_plots(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Layout, SynthError> {
    let cell_area_ha = cfg.cellsize_m * cfg.cellsize_m / 10_000.0;
    let sigma = (2.0 * (cfg.plot_area_mean_ha / cfg.plot_area_median_ha).ln()).sqrt();
    let dist = LogNormal::new((cfg.plot_area_median_ha / cell_area_ha).ln(), sigma)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let dims: Vec<(usize, usize)> = (0..cfg.n_plots)
        .map(|_| {
            let cells: f64 = dist.sample(rng);
            let aspect = rng.gen_range(1.0..2.0);
            let w = ((cells * aspect).sqrt().round() as usize).max(3);
            let h = ((cells / w as f64).round() as usize).max(3);
            (w, h)
        })
        .collect();
    let ncols = match cfg.extent_cols {
        Some(c) => c,
        None => {
            let footprint: usize = dims.iter().map(|(w, h)| (w + 1) * (h + 1)).sum();
            let widest = dims.iter().map(|d| d.0 + 2).max().unwrap_or(1);
            ((footprint as f64 * 1.1).sqrt().ceil() as usize).max(widest)
        }
    };
    let mut rects = Vec::with_capacity(dims.len());
    let (mut x, mut y, mut shelf) = (1usize, 1usize, 0usize);
    for &(w, h) in &dims {
        if w + 2 > ncols {
            return Err(SynthError::Config(format!(
                "a {w}-cell-wide plot does not fit in a {ncols}-cell-wide scene"
            )));
        }
        if x + w + 1 > ncols {
            x = 1;
            y += shelf + 1;
            shelf = 0;
        }
        rects.push((x, y, w, h));
        x += w + 1;
        shelf = shelf.max(h);
    }
    Ok(Layout {
        rects,
        ncols,
        nrows: y + shelf + 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Sky {
    Clear,
    Overcast,
    Partial(f64),
}

/// Acquisition days and sky state for one sensor.
fn acquisitions(cfg: &ScenarioConfig, s: &SensorSchedule, rng: &mut ChaCha8Rng) -> Vec<(u32, Sky)> {
    let c = &s.clouds;
    let offset = rng.gen_range(0..s.revisit_days);
    let mut spell_left = 0u32;
    let mut out = Vec::new();
    for day in 0..cfg.season_days {
        if spell_left == 0 && rng.gen::<f64>() < c.spell_start_probability {
            spell_left = rng.gen_range(c.spell_min_days..=c.spell_max_days);
        }
        let overcast = spell_left > 0;
        spell_left = spell_left.saturating_sub(1);
        let opportunity = day >= offset && (day - offset) % s.revisit_days == 0;
        let acquired = rng.gen::<f64>() < s.acquisition_probability;
        let partial = rng.gen::<f64>() < c.partial_probability;
        let cover = rng.gen_range(c.partial_cover_min..=c.partial_cover_max);
        let spell_cover = rng.gen_range(c.spell_cover_min..=1.0);
        if opportunity && acquired {
            let sky = if overcast && spell_cover >= 0.999 {
                Sky::Overcast
            } else if overcast {
                Sky::Partial(spell_cover)
            } else if partial {
                Sky::Partial(cover)
            } else {
                Sky::Clear
            };
            out.push((day, sky));
        }
    }
    out
}

/// Clear-sky mask; blobs are added until `cover` of the scene is clouded.
fn cloud_mask(g: &GridGeometry, sky: Sky, radius: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    match sky {
        Sky::Clear => vec![true; g.len()],
        Sky::Overcast => vec![false; g.len()],
        Sky::Partial(cover) => {
            let mut valid = vec![true; g.len()];
            let target = (cover * g.len() as f64).round() as usize;
            let mut clouded = 0usize;
            let r = radius.ceil() as isize;
            while clouded < target {
                let cr = rng.gen_range(0..g.nrows) as isize;
                let cc = rng.gen_range(0..g.ncols) as isize;
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (row, col) = (cr + dr, cc + dc);
                        if row < 0 || col < 0 || row >= g.nrows as isize || col >= g.ncols as isize {
                            continue;
                        }
                        if ((dr * dr + dc * dc) as f64) <= radius * radius {
                            let i = g.index(row as usize, col as usize);
                            if valid[i] {
                                valid[i] = false;
                                clouded += 1;
                            }
                        }
                    }
                }
            }
            valid
        }
    }
}

struct PlotState {
    burn_day: Option<i64>,
    till_day: i64,
    factor: Spectrum,
}

fn plot_level(signal: &SignalModel, p: &PlotState, band: usize, day: i64, with_signal: bool) -> f64 {
    let base = if !with_signal {
        signal.pre[band]
    } else if let Some(b) = p.burn_day {
        if day < b {
            signal.pre[band]
        } else {
            let decay = 0.5f64.powf((day - b) as f64 / signal.half_life_days);
            signal.till[band] + (signal.char[band] - signal.till[band]) * decay
        }
    } else if day < p.till_day {
        signal.pre[band]
    } else {
        signal.till[band]
    };
    base * p.factor[band]
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = layout_plots(cfg, &mut rng)?;
    let cs = cfg.cellsize_m;
    let geometry = GridGeometry::new(layout.ncols, layout.nrows, 0.0, 0.0, cs);

    let factor_dist = Normal::new(1.0, cfg.signal.plot_sd).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut plots = Vec::with_capacity(cfg.n_plots);
    let mut states = Vec::with_capacity(cfg.n_plots);
    let mut truth_plots = Vec::with_capacity(cfg.n_plots);
    let day = |d: i64| cfg.season_start + Duration::days(d);
    for (i, &(c0, r0, w, h)) in layout.rects.iter().enumerate() {
        let id = format!("P{:04}", i + 1);
        let burned = rng.gen::<f64>() < cfg.burn_probability;
        let event = rng.gen_range(cfg.event_window_start_day..=cfg.event_window_end_day) as i64;
        let lag = rng.gen_range(cfg.till_lag_min_days..=cfg.till_lag_max_days) as i64;
        let labeled = rng.gen::<f64>() < cfg.label_fraction;
        let group = if rng.gen::<f64>() < cfg.treatment_fraction {
            Group::Treatment
        } else {
            Group::Control
        };
        let mut factor = [1.0; 9];
        for f in &mut factor {
            *f = factor_dist.sample(&mut rng).clamp(0.5, 1.5);
        }
        let label = match (labeled, burned) {
            (false, _) => Label::Unlabeled,
            (true, true) => Label::Burned,
            (true, false) => Label::NotBurned,
        };
        let (burn_day, till_day) = if burned { (Some(event), event + lag) } else { (None, event) };
        let top = (layout.nrows - r0) as f64 * cs;
        let polygon = Polygon::rectangle(c0 as f64 * cs, top - h as f64 * cs, (c0 + w) as f64 * cs, top);
        plots.push(Plot::new(&id, polygon, &geometry, label, group)?);
        truth_plots.push(PlotTruth {
            plot_id: id,
            burned,
            burn_date: burn_day.map(day),
            till_date: day(till_day),
            label,
            group,
        });
        states.push(PlotState {
            burn_day,
            till_day,
            factor,
        });
    }

    let mut owner: Vec<Option<usize>> = vec![None; geometry.len()];
    for (i, p) in plots.iter().enumerate() {
        for &c in &p.pixels {
            owner[c] = Some(i);
        }
    }

    let mut cubes = BTreeMap::new();
    let mut observed = BTreeMap::new();
    for sensor in Sensor::ALL {
        let sched = cfg.schedule(sensor);
        let acq = acquisitions(cfg, sched, &mut rng);
        let seeds: Vec<u64> = acq.iter().map(|_| rng.gen()).collect();
        let bands = sensor.bands();
        let background = PlotState {
            burn_day: None,
            till_day: i64::MAX,
            factor: [1.0; 9],
        };
        let obs: Vec<BandObservation> = acq
            .par_iter()
            .zip(&seeds)
            .map(|(&(d, sky), &seed)| {
                let mut orng = ChaCha8Rng::seed_from_u64(seed);
                let valid = cloud_mask(&geometry, sky, sched.clouds.blob_radius_cells, &mut orng);
                let noise = Normal::new(0.0, sched.noise_sd.max(1e-12)).expect("finite sd");
                let planes = bands
                    .iter()
                    .map(|&band| {
                        let b = band.ordinal();
                        owner
                            .iter()
                            .map(|o| {
                                let state = o.map_or(&background, |i| &states[i]);
                                let v = plot_level(&cfg.signal, state, b, d as i64, sched.carries_signal)
                                    + noise.sample(&mut orng);
                                v.clamp(0.0, 1.0)
                            })
                            .collect()
                    })
                    .collect();
                BandObservation::from_reflectance(sensor, day(d as i64), geometry, planes, valid)
            })
            .collect::<Result<_, _>>()?;
        let per_plot: Vec<Vec<NaiveDate>> = plots
            .iter()
            .map(|p| {
                obs.iter()
                    .filter(|o| {
                        let clear = p.pixels.iter().filter(|&&c| o.valid_mask()[c]).count();
                        !p.pixels.is_empty() && 2 * clear >= p.pixels.len()
                    })
                    .map(|o| o.date())
                    .collect()
            })
            .collect();
        observed.insert(sensor, per_plot);
        cubes.insert(sensor, SceneCube::new(sensor, geometry, obs)?);
    }

    Ok(Scenario {
        config: cfg.clone(),
        geometry,
        cube_a: cubes.remove(&Sensor::A).expect("sensor A generated"),
        cube_b: cubes.remove(&Sensor::B).expect("sensor B generated"),
        plots,
        truth: GroundTruth {
            plots: truth_plots,
            observed,
        },
    })
}

/// One scheduled gap: a whole observation, or one plot's pixels within it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapEntry {
    pub sensor: Sensor,
    pub date: NaiveDate,
    pub plot_id: Option<String>,
}

/// Invalidates the scheduled observations or plot regions and updates the
/// truth table. Entries for dates without an acquisition are ignored.
pub fn inject_gaps(scn: &mut Scenario, schedule: &[GapEntry]) {
    let index: BTreeMap<&str, usize> = scn
        .plots
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let mut plot_cells: Vec<(Sensor, NaiveDate, Option<usize>)> = Vec::new();
    for e in schedule {
        let target = match &e.plot_id {
            Some(id) => match index.get(id.as_str()) {
                Some(&i) => Some(i),
                None => {
                    log::warn!("gap schedule names unknown plot {id}");
                    continue;
                }
            },
            None => None,
        };
        plot_cells.push((e.sensor, e.date, target));
    }
    for (sensor, date, target) in plot_cells {
        let pixels: Vec<usize> = match target {
            Some(i) => scn.plots[i].pixels.clone(),
            None => (0..scn.geometry.len()).collect(),
        };
        let Some(obs) = scn
            .cube_mut(sensor)
            .observations_mut()
            .iter_mut()
            .find(|o| o.date() == date)
        else {
            continue;
        };
        for c in pixels {
            if obs.is_valid(c) {
                obs.invalidate(c);
            }
        }
        if let Some(lists) = scn.truth.observed.get_mut(&sensor) {
            for (i, dates) in lists.iter_mut().enumerate() {
                if target.map_or(true, |t| t == i) {
                    dates.retain(|d| *d != date);
                }
            }
        }
    }
}

/// Every acquisition of `plot` from its event date through `days` days after
/// it, for burned plots only or for every plot.
pub fn post_event_schedule(scn: &Scenario, days: i64, burned_only: bool) -> Vec<GapEntry> {
    let mut out = Vec::new();
    for sensor in Sensor::ALL {
        let dates = scn.cube(sensor).dates();
        for p in &scn.truth.plots {
            if burned_only && !p.burned {
                continue;
            }
            let e = p.event_date();
            for &d in &dates {
                let off = (d - e).num_days();
                if (0..=days).contains(&off) {
                    out.push(GapEntry {
                        sensor,
                        date: d,
                        plot_id: Some(p.plot_id.clone()),
                    });
                }
            }
        }
    }
    out
}

/// Reflectance written under clouds; the mask grid flags those cells.
const CLOUD_DN: f64 = 6000.0;

/// Paths of the files written for a scenario.
pub struct WrittenScenario {
    pub manifest: PathBuf,
    pub plots: PathBuf,
    pub truth: PathBuf,
    pub events: PathBuf,
    pub config: PathBuf,
}

/// Writes grids, manifest, plot table, truth table, event table and config.
pub fn write_scenario(scn: &Scenario, dir: &Path) -> Result<WrittenScenario, SynthError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| SynthError::Io { path: p, source }
    };
    let grids = dir.join("grids");
    fs::create_dir_all(&grids).map_err(io(&grids))?;
    let g = scn.geometry;
    let mut entries = Vec::new();
    for sensor in Sensor::ALL {
        for obs in scn.cube(sensor).observations() {
            let stem = format!("{}_{}", sensor, obs.date());
            let mask_name = format!("{stem}_mask.asc");
            let mask = Raster::new(
                g,
                obs.valid_mask().iter().map(|&v| if v { 0.0 } else { 1.0 }).collect(),
            );
            write_grid(&grids.join(&mask_name), &mask, -9999.0)?;
            for &band in sensor.bands() {
                let plane = obs.dn_plane(band).expect("sensor band present");
                let values = plane
                    .iter()
                    .zip(obs.valid_mask())
                    .map(|(&dn, &ok)| if ok { f64::from(dn) } else { CLOUD_DN })
                    .collect();
                let name = format!("{stem}_{band}.asc");
                write_grid(&grids.join(&name), &Raster::new(g, values), -9999.0)?;
                entries.push(ManifestEntry {
                    sensor,
                    date: obs.date(),
                    band,
                    grid: PathBuf::from("grids").join(&name),
                    mask: Some(PathBuf::from("grids").join(&mask_name)),
                });
            }
        }
    }
    debug_assert_eq!(DN_SCALE, 10_000.0);
    let out = WrittenScenario {
        manifest: dir.join("manifest.json"),
        plots: dir.join("plots.csv"),
        truth: dir.join("truth.csv"),
        events: dir.join("events.csv"),
        config: dir.join("scenario.toml"),
    };
    Manifest {
        mask_threshold: 0.5,
        entries,
    }
    .write(&out.manifest)?;
    write_plots(&out.plots, &scn.plots)?;
    scn.truth.write_csv(&out.truth)?;
    write_events(&out.events, &scn.truth.events())?;
    fs::write(&out.config, scn.config.to_toml()).map_err(io(&out.config))?;
    Ok(out)
}
