//! Pixel time series collapsed into fixed-length feature vectors.
//!
//! Feature names follow `<sensor>_<source>_<stat>`, e.g. `B_MIRBI_max` or
//! `A_CI_drop0`. Missing values are `NaN` in memory and empty fields in CSV.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indices::{evaluate_source, IndexId, IndexParams, Source};
use crate::scene::{Plot, SceneCube, Sensor};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no sensor cube supplied")]
    NoSensors,
    #[error("cubes for sensors A and B are on different grids")]
    Misaligned,
    #[error("cube passed as sensor {expected} holds sensor {found} observations")]
    WrongSensor { expected: Sensor, found: Sensor },
    #[error("feature table: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub p10: f64,
    pub p20: f64,
    pub p80: f64,
    pub p90: f64,
    pub mean: f64,
}

/// Percentile `p` (0..=100) of ascending `sorted`, interpolating linearly
/// between the two closest ranks at position `p / 100 * (n - 1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `None` for an empty series.
pub fn temporal_stats(series: &[f64]) -> Option<TemporalStats> {
    if series.is_empty() {
        return None;
    }
    let mut s = series.to_vec();
    s.sort_by(f64::total_cmp);
    Some(TemporalStats {
        min: s[0],
        max: s[s.len() - 1],
        median: percentile(&s, 50.0),
        p10: percentile(&s, 10.0),
        p20: percentile(&s, 20.0),
        p80: percentile(&s, 80.0),
        p90: percentile(&s, 90.0),
        mean: s.iter().sum::<f64>() / s.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Drop,
    Spike,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdiffSpec {
    pub direction: Direction,
    /// Number of following values that must stay past the threshold.
    pub buffer: usize,
    /// Reference level; the series mean when `None`.
    pub threshold: Option<f64>,
}

impl VdiffSpec {
    pub fn drop(buffer: usize) -> Self {
        VdiffSpec {
            direction: Direction::Drop,
            buffer,
            threshold: None,
        }
    }

    pub fn spike(buffer: usize) -> Self {
        VdiffSpec {
            direction: Direction::Spike,
            buffer,
            threshold: None,
        }
    }
}

/// Largest single-step drop (most negative `V[t+1] - V[t]`) whose values
/// `V[t+1..=t+1+b]` all stay strictly below the threshold; spikes mirror this
/// above it. The persistence window must fit inside the series. Returns 0
/// when no step qualifies and `None` when the series is shorter than `b + 2`.
pub fn vdiff(series: &[f64], spec: &VdiffSpec) -> Option<f64> {
    let b = spec.buffer;
    let n = series.len();
    if n < b + 2 {
        return None;
    }
    let threshold = spec
        .threshold
        .unwrap_or_else(|| series.iter().sum::<f64>() / n as f64);
    let mut best = 0.0f64;
    for t in 0..n - 1 - b {
        let step = series[t + 1] - series[t];
        let window = &series[t + 1..=t + 1 + b];
        match spec.direction {
            Direction::Drop => {
                if step < best && window.iter().all(|&v| v < threshold) {
                    best = step;
                }
            }
            Direction::Spike => {
                if step > best && window.iter().all(|&v| v > threshold) {
                    best = step;
                }
            }
        }
    }
    Some(best)
}

/// Per-source statistic suffixes, in column order.
pub const STAT_NAMES: [&str; 14] = [
    "min", "max", "median", "p10", "p20", "p80", "p90", "mean", "drop0", "drop1", "drop2",
    "spike0", "spike1", "spike2",
];

fn source_features(series: &[f64], out: &mut Vec<f64>) {
    match temporal_stats(series) {
        Some(s) => out.extend([s.min, s.max, s.median, s.p10, s.p20, s.p80, s.p90, s.mean]),
        None => out.extend([f64::NAN; 8]),
    }
    for b in 0..3 {
        out.push(vdiff(series, &VdiffSpec::drop(b)).unwrap_or(f64::NAN));
    }
    for b in 0..3 {
        out.push(vdiff(series, &VdiffSpec::spike(b)).unwrap_or(f64::NAN));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    pub indices: Vec<IndexId>,
    pub include_border: bool,
    /// Keep at most this many pixels per plot, evenly spaced in cell order.
    pub max_pixels_per_plot: Option<usize>,
    #[serde(skip)]
    pub index_params: IndexParams,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            indices: IndexId::ALL.to_vec(),
            include_border: false,
            max_pixels_per_plot: None,
            index_params: IndexParams::default(),
        }
    }
}

impl FeatureOptions {
    /// Bands then indices available on `sensor`. BASMA is dropped without an
    /// endmember set.
    pub fn sources_for(&self, sensor: Sensor) -> Vec<Source> {
        let mut out: Vec<Source> = sensor.bands().iter().map(|&b| Source::Band(b)).collect();
        for &id in &self.indices {
            if id == IndexId::BasmaChar && self.index_params.endmembers.is_none() {
                continue;
            }
            if id.computable_from(sensor) {
                out.push(Source::Index(id));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub plot_id: String,
    pub pixel_id: usize,
    pub border: bool,
    pub values: Vec<f64>,
    pub n_obs_a: usize,
    pub n_obs_b: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, row: usize, name: &str) -> Option<f64> {
        self.column(name).map(|c| self.rows[row].values[c])
    }

    /// Keeps only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<FeatureTable, FeatureError> {
        let cols: Vec<usize> = names
            .iter()
            .map(|n| {
                self.column(n)
                    .ok_or_else(|| FeatureError::Format(format!("unknown feature {n}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureTable {
            names: names.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| FeatureRow {
                    values: cols.iter().map(|&c| r.values[c]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["plot_id".to_string(), "pixel_id".into(), "border".into()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.plot_id.clone(),
                r.pixel_id.to_string(),
                u8::from(r.border).to_string(),
            ];
            rec.extend(r.values.iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a table written by [`FeatureTable::write_csv`]. Observation counts
    /// are restored from the `A_n_obs`/`B_n_obs` columns when present.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, FeatureError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "plot_id" || &header[1] != "pixel_id" || &header[2] != "border" {
            return Err(FeatureError::Format(
                "header must start with plot_id,pixel_id,border".into(),
            ));
        }
        let names: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
        let na = names.iter().position(|n| n == "A_n_obs");
        let nb = names.iter().position(|n| n == "B_n_obs");
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64, FeatureError> {
                if s.is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.parse()
                        .map_err(|_| FeatureError::Format(format!("bad value {s:?}")))
                }
            };
            let values: Vec<f64> = rec.iter().skip(3).map(parse).collect::<Result<_, _>>()?;
            let count = |i: Option<usize>| i.map(|i| values[i]).filter(|v| v.is_finite()).unwrap_or(0.0) as usize;
            rows.push(FeatureRow {
                plot_id: rec[0].to_string(),
                pixel_id: rec[1]
                    .parse()
                    .map_err(|_| FeatureError::Format(format!("bad pixel id {:?}", &rec[1])))?,
                border: &rec[2] == "1",
                n_obs_a: count(na),
                n_obs_b: count(nb),
                values,
            });
        }
        Ok(FeatureTable { names, rows })
    }
}

/// Column names for the given sensors, in the order values are produced.
pub fn feature_names(sensors: &[Sensor], opts: &FeatureOptions) -> Vec<String> {
    let mut names = Vec::new();
    for &s in sensors {
        for src in opts.sources_for(s) {
            for stat in STAT_NAMES {
                names.push(format!("{}_{}_{}", s.tag(), src.name(), stat));
            }
        }
    }
    for &s in sensors {
        names.push(format!("{}_n_obs", s.tag()));
    }
    names
}

fn pick_pixels(plot: &Plot, opts: &FeatureOptions) -> Vec<usize> {
    let cells: Vec<usize> = if opts.include_border {
        plot.pixels.clone()
    } else {
        plot.interior_pixels().collect()
    };
    match opts.max_pixels_per_plot {
        Some(k) if k > 0 && cells.len() > k => (0..k).map(|i| cells[i * cells.len() / k]).collect(),
        _ => cells,
    }
}

/// One row per retained plot pixel with temporal statistics of every band and
/// index of each supplied sensor, plus per-sensor valid-observation counts.
pub fn build_feature_table(
    cube_a: Option<&SceneCube>,
    cube_b: Option<&SceneCube>,
    plots: &[Plot],
    opts: &FeatureOptions,
) -> Result<FeatureTable, FeatureError> {
    let mut cubes: Vec<&SceneCube> = Vec::new();
    for (expected, cube) in [(Sensor::A, cube_a), (Sensor::B, cube_b)] {
        if let Some(c) = cube {
            if c.sensor() != expected {
                return Err(FeatureError::WrongSensor {
                    expected,
                    found: c.sensor(),
                });
            }
            cubes.push(c);
        }
    }
    if cubes.is_empty() {
        return Err(FeatureError::NoSensors);
    }
    if cubes.len() == 2 && !cubes[0].geometry().aligned_with(cubes[1].geometry()) {
        return Err(FeatureError::Misaligned);
    }
    let sensors: Vec<Sensor> = cubes.iter().map(|c| c.sensor()).collect();
    let names = feature_names(&sensors, opts);
    let sources: Vec<Vec<Source>> = sensors.iter().map(|&s| opts.sources_for(s)).collect();

    let per_plot: Vec<Vec<FeatureRow>> = plots
        .par_iter()
        .map(|plot| {
            let pixels = pick_pixels(plot, opts);
            let mut rows = Vec::with_capacity(pixels.len());
            let mut series: Vec<Vec<f64>> = Vec::new();
            for cell in pixels {
                let mut values = Vec::with_capacity(names.len());
                let mut counts = [0usize; 2];
                for (ci, cube) in cubes.iter().enumerate() {
                    let srcs = &sources[ci];
                    series.clear();
                    series.resize(srcs.len(), Vec::new());
                    let mut n_obs = 0;
                    for obs in cube.observations() {
                        let Some(bands) = obs.band_values(cell) else {
                            continue;
                        };
                        n_obs += 1;
                        for (si, &src) in srcs.iter().enumerate() {
                            if let Ok(v) = evaluate_source(src, &bands, &opts.index_params) {
                                series[si].push(v);
                            }
                        }
                    }
                    counts[cube.sensor() as usize] = n_obs;
                    for s in &series {
                        source_features(s, &mut values);
                    }
                }
                for cube in &cubes {
                    values.push(counts[cube.sensor() as usize] as f64);
                }
                rows.push(FeatureRow {
                    plot_id: plot.id.clone(),
                    pixel_id: cell,
                    border: plot.is_border(cell),
                    values,
                    n_obs_a: counts[0],
                    n_obs_b: counts[1],
                });
            }
            if rows.iter().all(|r| r.n_obs_a + r.n_obs_b == 0) && !rows.is_empty() {
                log::warn!("plot {} has no valid observations; its features are all missing", plot.id);
            }
            rows
        })
        .collect();

    Ok(FeatureTable {
        names,
        rows: per_plot.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BandObservation, GridGeometry, Group, Label, Polygon, POISON_DN};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    // Straightforward restatement used as an oracle.
    fn vdiff_oracle(series: &[f64], spec: &VdiffSpec) -> Option<f64> {
        let n = series.len();
        if n < spec.buffer + 2 {
            return None;
        }
        let thr = spec.threshold.unwrap_or(series.iter().sum::<f64>() / n as f64);
        let mut candidates = vec![0.0];
        for t in 0..n - 1 {
            let last = t + 1 + spec.buffer;
            if last >= n {
                continue;
            }
            let ok = (t + 1..=last).all(|k| match spec.direction {
                Direction::Drop => series[k] < thr,
                Direction::Spike => series[k] > thr,
            });
            if ok {
                candidates.push(series[t + 1] - series[t]);
            }
        }
        Some(match spec.direction {
            Direction::Drop => candidates.into_iter().fold(0.0, f64::min),
            Direction::Spike => candidates.into_iter().fold(0.0, f64::max),
        })
    }

    #[test]
    fn single_value_stats() {
        let s = temporal_stats(&[5.0]).unwrap();
        for v in [s.min, s.max, s.median, s.p10, s.p20, s.p80, s.p90, s.mean] {
            assert_eq!(v, 5.0);
        }
        assert!(temporal_stats(&[]).is_none());
    }

    #[test]
    fn one_to_ten_percentiles() {
        let series: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = temporal_stats(&series).unwrap();
        assert!((s.median - 5.5).abs() < 1e-12);
        assert!((s.p10 - 1.9).abs() < 1e-12);
        assert!((s.p90 - 9.1).abs() < 1e-12);
        assert!((s.p20 - 2.8).abs() < 1e-12);
        assert!((s.p80 - 8.2).abs() < 1e-12);
    }

    #[test]
    fn constant_series_stats() {
        let s = temporal_stats(&[0.3; 7]).unwrap();
        assert_eq!(s.min, s.max);
        assert_eq!(s.median, s.min);
        assert!((s.mean - 0.3).abs() < 1e-15);
    }

    #[test]
    fn vdiff_examples() {
        let inc: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(vdiff(&inc, &VdiffSpec::drop(1)), Some(0.0));
        let s = [10.0, 10.0, 2.0, 2.0, 2.0];
        assert_eq!(vdiff(&s, &VdiffSpec::drop(2)), Some(-8.0));
        assert_eq!(vdiff(&[1.0, 2.0], &VdiffSpec::drop(1)), None);
        assert_eq!(vdiff(&[1.0, 2.0, 3.0], &VdiffSpec::spike(1)), Some(0.0));
        assert_eq!(vdiff(&[1.0, 1.0, 3.0, 3.0], &VdiffSpec::spike(1)), Some(2.0));
    }

    proptest! {
        #[test]
        fn vdiff_matches_oracle(
            series in prop::collection::vec(-1.0f64..1.0, 0..40),
            b in 0usize..3,
            spike in any::<bool>(),
        ) {
            let spec = if spike { VdiffSpec::spike(b) } else { VdiffSpec::drop(b) };
            let got = vdiff(&series, &spec);
            prop_assert_eq!(got, vdiff_oracle(&series, &spec));
            if let Some(v) = got {
                let signed_ok = if spike { v >= 0.0 } else { v <= 0.0 };
                prop_assert!(signed_ok);
            }
        }

        #[test]
        fn stats_are_ordered(series in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let s = temporal_stats(&series).unwrap();
            prop_assert!(s.min <= s.p10 && s.p10 <= s.p20 && s.p20 <= s.median);
            prop_assert!(s.median <= s.p80 && s.p80 <= s.p90 && s.p90 <= s.max);
        }
    }

    fn square_scene(days: &[u32]) -> (SceneCube, Vec<Plot>) {
        let g = GridGeometry::new(20, 20, 0.0, 0.0, 3.0);
        let plot = Plot::new(
            "sq",
            Polygon::rectangle(6.0, 6.0, 33.0, 33.0),
            &g,
            Label::Burned,
            Group::Treatment,
        )
        .unwrap();
        let obs = days
            .iter()
            .map(|&d| {
                let date = NaiveDate::from_ymd_opt(2019, 10, d).unwrap();
                let planes = (0..4)
                    .map(|b| vec![0.05 + 0.05 * b as f64 + 0.01 * d as f64; g.len()])
                    .collect();
                BandObservation::from_reflectance(Sensor::A, date, g, planes, vec![true; g.len()])
                    .unwrap()
            })
            .collect();
        (SceneCube::new(Sensor::A, g, obs).unwrap(), vec![plot])
    }

    #[test]
    fn border_pixels_are_dropped_by_default() {
        let (cube, plots) = square_scene(&[1, 2, 3]);
        let t = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 49);
        let with = FeatureOptions {
            include_border: true,
            ..Default::default()
        };
        let t = build_feature_table(Some(&cube), None, &plots, &with).unwrap();
        assert_eq!(t.rows.len(), 81);
        assert_eq!(t.rows.iter().filter(|r| r.border).count(), 32);
    }

    #[test]
    fn only_present_sensors_are_named() {
        let (cube, plots) = square_scene(&[1, 2]);
        let t = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        assert!(t.names.iter().all(|n| n.starts_with("A_")));
        assert!(t.column("A_CI_drop0").is_some());
        assert!(t.column("A_MIRBI_max").is_none());
    }

    #[test]
    fn row_composes_stats_and_vdiff() {
        let (cube, plots) = square_scene(&[1, 3, 4, 9]);
        let t = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        let red: Vec<f64> = [1.0, 3.0, 4.0, 9.0].iter().map(|d| 0.15 + 0.01 * d).collect();
        let s = temporal_stats(&red).unwrap();
        let v = |n: &str| t.value(0, n).unwrap();
        assert!((v("A_red_p20") - s.p20).abs() < 1e-4);
        assert!((v("A_red_max") - s.max).abs() < 1e-4);
        assert_eq!(v("A_red_drop0"), 0.0);
        assert!((v("A_red_spike2") - vdiff(&red, &VdiffSpec::spike(2)).unwrap()).abs() < 1e-4);
        assert_eq!(v("A_n_obs"), 4.0);
        assert_eq!(t.rows[0].n_obs_a, 4);
    }

    #[test]
    fn masked_observation_only_affects_its_pixel() {
        let (mut cube, plots) = square_scene(&[1, 2, 5, 7]);
        let before = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        let target = before.rows[3].pixel_id;
        cube.observations_mut()[2].invalidate(target);
        let after = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        for (a, b) in before.rows.iter().zip(&after.rows) {
            if a.pixel_id == target {
                assert_eq!(b.n_obs_a, 3);
            } else {
                assert_eq!(a, b);
            }
        }
        let poison = f64::from(POISON_DN) / crate::scene::DN_SCALE;
        assert!(after.rows.iter().flat_map(|r| &r.values).all(|&v| v != poison));
    }

    #[test]
    fn csv_round_trip() {
        let (cube, plots) = square_scene(&[1, 2]);
        let t = build_feature_table(Some(&cube), None, &plots, &FeatureOptions::default()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = FeatureTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.names, t.names);
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in t.rows.iter().zip(&back.rows) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!(x == y || (x.is_nan() && y.is_nan()));
            }
            assert_eq!(a.n_obs_a, b.n_obs_a);
        }
    }
}
