//! File formats for grids, scene manifests and plot tables.
//!
//! Grid files are plain text: a header line `ncols nrows xll yll cellsize nodata`
//! followed by `ncols * nrows` whitespace-separated values in row-major order
//! (first row is the northern edge). Band grids hold digital numbers scaled by
//! [`DN_SCALE`]; mask grids hold cloud probabilities in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    upsample_cubic, Band, BandObservation, GridGeometry, Group, Label, Plot, PlotAttributes, Polygon, Raster,
    SceneCube, SceneError, Sensor, DN_SCALE,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> SceneError {
    SceneError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn parse_grid(text: &str, path: &Path) -> Result<Raster, SceneError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(path, "empty grid file"))?;
    let h: Vec<f64> = header
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if h.len() != 6 {
        return Err(format_err(
            path,
            "header must be `ncols nrows xll yll cellsize nodata`",
        ));
    }
    if h[0] < 1.0 || h[1] < 1.0 || h[0].fract() != 0.0 || h[1].fract() != 0.0 || h[4] <= 0.0 {
        return Err(format_err(path, "invalid grid dimensions"));
    }
    let geometry = GridGeometry::new(h[0] as usize, h[1] as usize, h[2], h[3], h[4]);
    let nodata = h[5];
    let mut values = Vec::with_capacity(geometry.len());
    let mut valid = Vec::with_capacity(geometry.len());
    for line in lines {
        for tok in line.split_ascii_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format_err(path, format!("bad value {tok:?}")))?;
            let ok = v != nodata && v.is_finite();
            values.push(if ok { v } else { f64::NAN });
            valid.push(ok);
        }
    }
    if values.len() != geometry.len() {
        return Err(format_err(
            path,
            format!("expected {} values, found {}", geometry.len(), values.len()),
        ));
    }
    Ok(Raster {
        geometry,
        values,
        valid,
    })
}

pub fn read_grid(path: &Path) -> Result<Raster, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_grid(&text, path)
}

/// Writes a grid; invalid cells are written as `nodata`.
pub fn write_grid(path: &Path, raster: &Raster, nodata: f64) -> Result<(), SceneError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let g = raster.geometry;
    let mut body = String::with_capacity(g.len() * 6);
    body.push_str(&format!(
        "{} {} {} {} {} {}\n",
        g.ncols, g.nrows, g.xll, g.yll, g.cellsize, nodata
    ));
    for row in 0..g.nrows {
        for col in 0..g.ncols {
            let i = g.index(row, col);
            if col > 0 {
                body.push(' ');
            }
            let v = if raster.valid[i] { raster.values[i] } else { nodata };
            body.push_str(&v.to_string());
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sensor: Sensor,
    pub date: NaiveDate,
    pub band: Band,
    pub grid: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

fn default_mask_threshold() -> f64 {
    0.5
}

/// Scene manifest (JSON). Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn sensors(&self) -> Vec<Sensor> {
        let mut s: Vec<Sensor> = self.entries.iter().map(|e| e.sensor).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Cubes loaded from a manifest, one per sensor present.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub geometry: GridGeometry,
    pub cubes: BTreeMap<Sensor, SceneCube>,
}

impl Ingested {
    pub fn cube(&self, sensor: Sensor) -> Option<&SceneCube> {
        self.cubes.get(&sensor)
    }
}

/// Brings `raster` onto `target`, upsampling by an integer factor if needed.
fn onto_target(raster: Raster, target: &GridGeometry, path: &Path) -> Result<Raster, SceneError> {
    if raster.geometry.aligned_with(target) {
        return Ok(raster);
    }
    let ratio = raster.geometry.cellsize / target.cellsize;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-6 {
        return Err(SceneError::Misaligned(format!(
            "{}: cell size {} is not an integer multiple of {}",
            path.display(),
            raster.geometry.cellsize,
            target.cellsize
        )));
    }
    let up = upsample_cubic(&raster, factor as usize)?;
    if !up.geometry.aligned_with(target) {
        return Err(SceneError::Misaligned(format!(
            "{}: upsampled grid does not land on the common grid",
            path.display()
        )));
    }
    Ok(up)
}

/// Reads every grid in the manifest, resamples coarser bands onto the finest
/// grid, applies cloud masks and builds one cube per sensor.
pub fn ingest(manifest_path: &Path) -> Result<Ingested, SceneError> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut grids: Vec<(ManifestEntry, Raster)> = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = resolve(&entry.grid);
        grids.push((entry.clone(), read_grid(&path)?));
    }
    let target = grids
        .iter()
        .map(|(_, r)| r.geometry)
        .min_by(|a, b| a.cellsize.total_cmp(&b.cellsize))
        .ok_or_else(|| format_err(manifest_path, "manifest has no entries"))?;

    let mut masks: HashMap<PathBuf, Raster> = HashMap::new();
    let mut groups: BTreeMap<(Sensor, NaiveDate), HashMap<Band, (Raster, Option<PathBuf>)>> =
        BTreeMap::new();
    for (entry, raster) in grids {
        let path = resolve(&entry.grid);
        let raster = onto_target(raster, &target, &path)?;
        let mask_path = entry.mask.as_ref().map(|m| resolve(m));
        if let Some(mp) = &mask_path {
            if !masks.contains_key(mp) {
                let m = onto_target(read_grid(mp)?, &target, mp)?;
                masks.insert(mp.clone(), m);
            }
        }
        let slot = groups.entry((entry.sensor, entry.date)).or_default();
        if slot.insert(entry.band, (raster, mask_path)).is_some() {
            return Err(format_err(
                manifest_path,
                format!("duplicate {} {} band {}", entry.sensor, entry.date, entry.band),
            ));
        }
    }

    let mut per_sensor: BTreeMap<Sensor, Vec<BandObservation>> = BTreeMap::new();
    for ((sensor, date), mut bands) in groups {
        let mut valid = vec![true; target.len()];
        let mut planes = Vec::with_capacity(sensor.bands().len());
        for &band in sensor.bands() {
            let (raster, mask) = bands
                .remove(&band)
                .ok_or(SceneError::MissingBand { sensor, date, band })?;
            if let Some(mp) = mask {
                let m = &masks[&mp];
                for (cell, ok) in valid.iter_mut().enumerate() {
                    if !m.valid[cell] || m.values[cell] >= manifest.mask_threshold {
                        *ok = false;
                    }
                }
            }
            let plane: Vec<f64> = raster
                .values
                .iter()
                .zip(&raster.valid)
                .zip(valid.iter_mut())
                .map(|((&v, &ok), cell_ok)| {
                    if !ok {
                        *cell_ok = false;
                        f64::NAN
                    } else {
                        v / DN_SCALE
                    }
                })
                .collect();
            planes.push(plane);
        }
        if let Some(extra) = bands.keys().next() {
            log::warn!("ignoring band {extra} for sensor {sensor} on {date}");
        }
        let obs = BandObservation::from_reflectance(sensor, date, target, planes, valid)?;
        per_sensor.entry(sensor).or_default().push(obs);
    }

    let mut cubes = BTreeMap::new();
    for (sensor, obs) in per_sensor {
        cubes.insert(sensor, SceneCube::new(sensor, target, obs)?);
    }
    Ok(Ingested {
        geometry: target,
        cubes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PlotRecord {
    plot_id: String,
    label: String,
    group: String,
    wkt_polygon: String,
}

/// Reads ids, labels and groups from the plot table, ignoring polygons.
pub fn read_plot_attributes(path: &Path) -> Result<Vec<PlotAttributes>, SceneError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: PlotRecord = rec?;
        out.push(PlotAttributes {
            label: rec.label.parse::<Label>().map_err(|e| format_err(path, e))?,
            group: rec.group.parse::<Group>().map_err(|e| format_err(path, e))?,
            id: rec.plot_id,
        });
    }
    Ok(out)
}

/// Reads the plot table and rasterizes every polygon onto `geometry`.
pub fn read_plots(path: &Path, geometry: &GridGeometry) -> Result<Vec<Plot>, SceneError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut plots = Vec::new();
    for rec in rdr.deserialize() {
        let rec: PlotRecord = rec?;
        let label = rec
            .label
            .parse::<Label>()
            .map_err(|e| format_err(path, e))?;
        let group = rec
            .group
            .parse::<Group>()
            .map_err(|e| format_err(path, e))?;
        let polygon = Polygon::from_wkt(&rec.wkt_polygon)?;
        let plot = Plot::new(&rec.plot_id, polygon, geometry, label, group).map_err(|e| {
            format_err(path, format!("plot {}: {e}", rec.plot_id))
        })?;
        plots.push(plot);
    }
    Ok(plots)
}

pub fn write_plots(path: &Path, plots: &[Plot]) -> Result<(), SceneError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in plots {
        w.serialize(PlotRecord {
            plot_id: p.id.clone(),
            label: p.label.name().to_string(),
            group: p.group.name().to_string(),
            wkt_polygon: p.polygon.to_wkt(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Dated event for one plot: the burn date of a burned plot or the till date
/// of an unburned one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub plot_id: String,
    pub event_date: NaiveDate,
    pub burned: bool,
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, SceneError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<(), SceneError> {
    let mut w = csv::Writer::from_path(path)?;
    for e in events {
        w.serialize(e)?;
    }
    w.flush().map_err(io_err(path))
}
