//! Reproducible end-to-end runs and sensor ablations.
//!
//! A run executes the stages in order: gap report, separability curves,
//! feature extraction, importance ranking, forward selection, plot-holdout
//! cross-validation, threshold selection, final model and predictions. Each
//! run writes into a fresh directory whose `manifest.json` records the config
//! hash, seed, input and artifact hashes, and whether the run completed.

use std::collections::{BTreeMap, HashMap};
use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{build_feature_table, FeatureOptions, FeatureTable};
use crate::forest::{
    cross_validate, sequential_select, CvMode, CvResult, Dataset, ForestModel, ForestParams, Selection,
    SelectionParams,
};
use crate::indices::Source;
use crate::scene::io::{ingest, read_events, read_plots, EventRecord, Manifest};
use crate::scene::{gap_statistics, GapReport, Plot, PlotAttributes, SceneCube, Sensor};
use crate::separability::{separability_curve, write_curves_csv, Event, SeparabilityCurve};
use crate::threshold::{
    aggregate_plot, balanced_accuracy_threshold, max_accuracy_threshold, predict_plots, prediction_summary,
    threshold_sweep, write_confusion_csv, write_predictions_csv, write_sweep_csv, PlotPrediction, Policy,
    PredictionSummary, SweepRow, ThresholdChoice,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "BURNMAP_OUTPUT_ROOT";

/// Output root used when the config names none: `$BURNMAP_OUTPUT_ROOT`, else `runs`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorMode {
    #[serde(rename = "combined")]
    Combined,
    #[serde(rename = "A_only")]
    AOnly,
    #[serde(rename = "B_only")]
    BOnly,
}

impl SensorMode {
    pub const ALL: [SensorMode; 3] = [SensorMode::Combined, SensorMode::AOnly, SensorMode::BOnly];

    pub fn name(self) -> &'static str {
        match self {
            SensorMode::Combined => "combined",
            SensorMode::AOnly => "A_only",
            SensorMode::BOnly => "B_only",
        }
    }

    pub fn sensors(self) -> &'static [Sensor] {
        match self {
            SensorMode::Combined => &Sensor::ALL,
            SensorMode::AOnly => &[Sensor::A],
            SensorMode::BOnly => &[Sensor::B],
        }
    }

    pub fn uses(self, sensor: Sensor) -> bool {
        self.sensors().contains(&sensor)
    }
}

impl fmt::Display for SensorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PipelineError::Config(format!("unknown sensor mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Gaps,
    Separability,
    Features,
    Importance,
    Selection,
    CrossValidation,
    Thresholds,
    FinalModel,
    Predictions,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Gaps => "gaps",
            Stage::Separability => "separability",
            Stage::Features => "features",
            Stage::Importance => "importance",
            Stage::Selection => "selection",
            Stage::CrossValidation => "cross_validation",
            Stage::Thresholds => "thresholds",
            Stage::FinalModel => "final_model",
            Stage::Predictions => "predictions",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot compare runs: {0}")]
    Comparison(String),
}

impl PipelineError {
    /// Stage that failed, if the error came from a stage.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn at_stage<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything that shapes a run's results, independent of file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    pub sensor_mode: SensorMode,
    /// Master seed; overrides the seeds inside `forest` and `selection`.
    pub seed: u64,
    pub features: FeatureOptions,
    pub forest: ForestParams,
    /// Features ranked by Gini importance that enter selection.
    pub importance_pool: usize,
    /// Run forward selection on the pool; otherwise the whole pool is used.
    pub select_features: bool,
    pub selection: SelectionParams,
    pub cv: CvMode,
    pub policies: Vec<Policy>,
    /// Last whole-day offset of the separability curves.
    pub separability_max_offset: i64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            sensor_mode: SensorMode::Combined,
            seed: 0,
            features: FeatureOptions::default(),
            forest: ForestParams::default(),
            importance_pool: 50,
            select_features: true,
            selection: SelectionParams::default(),
            cv: CvMode::Auto,
            policies: vec![Policy::MaxAccuracy, Policy::Balanced],
            separability_max_offset: 8,
        }
    }
}

impl AnalysisParams {
    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            seed: self.seed,
            ..self.forest.clone()
        }
    }

    pub fn selection_params(&self) -> SelectionParams {
        let mut s = self.selection.clone();
        s.forest.seed = self.seed;
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.forest.n_trees == 0 || self.selection.forest.n_trees == 0 {
            return bad("forests need at least one tree");
        }
        if self.importance_pool == 0 {
            return bad("importance_pool must be positive");
        }
        if self.select_features && self.selection.target_k == 0 {
            return bad("selection.target_k must be positive");
        }
        if !(self.selection.train_fraction > 0.0 && self.selection.train_fraction < 1.0) {
            return bad("selection.train_fraction must lie in (0, 1)");
        }
        if self.policies.is_empty() {
            return bad("at least one threshold policy is required");
        }
        if self.separability_max_offset < 0 {
            return bad("separability_max_offset must be non-negative");
        }
        Ok(())
    }
}

/// A full run: input files, output location and analysis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scene manifest (JSON).
    pub manifest: PathBuf,
    /// Plot table (CSV with WKT polygons).
    pub plots: PathBuf,
    /// Optional event table; enables separability curves.
    #[serde(default)]
    pub events: Option<PathBuf>,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    /// Prefix of the run directory name; the sensor mode when absent.
    #[serde(default)]
    pub run_name: Option<String>,
    #[serde(default)]
    pub analysis: AnalysisParams,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, plots: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest: manifest.into(),
            plots: plots.into(),
            events: None,
            output_root: default_output_root(),
            run_name: None,
            analysis: AnalysisParams::default(),
        }
    }

    /// Parses a TOML config. Relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.plots);
        if let Some(e) = cfg.events.as_mut() {
            fix(e);
        }
        fix(&mut cfg.output_root);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Checks that inputs exist and that the manifest holds the sensors the
    /// mode needs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.analysis.validate()?;
        for (what, p) in [("manifest", Some(&self.manifest)), ("plots", Some(&self.plots)), ("events", self.events.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(PipelineError::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        let manifest = Manifest::read(&self.manifest).map_err(|e| PipelineError::Config(e.to_string()))?;
        let present = manifest.sensors();
        for s in self.analysis.sensor_mode.sensors() {
            if !present.contains(s) {
                return Err(PipelineError::Config(format!(
                    "sensor mode {} needs sensor {s}, which the manifest does not list",
                    self.analysis.sensor_mode
                )));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// In-memory inputs of one analysis.
#[derive(Clone, Copy, Debug)]
pub struct PipelineInput<'a> {
    pub cube_a: Option<&'a SceneCube>,
    pub cube_b: Option<&'a SceneCube>,
    pub plots: &'a [Plot],
    pub events: Option<&'a [EventRecord]>,
}

impl<'a> PipelineInput<'a> {
    fn cubes(&self, mode: SensorMode) -> (Option<&'a SceneCube>, Option<&'a SceneCube>) {
        (
            self.cube_a.filter(|_| mode.uses(Sensor::A)),
            self.cube_b.filter(|_| mode.uses(Sensor::B)),
        )
    }
}

/// Machine-readable result of a run, used for ablation comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sensor_mode: SensorMode,
    pub selected_features: Vec<String>,
    /// Plots that received an out-of-fold score, sorted.
    pub plot_ids: Vec<String>,
    pub choices: Vec<ThresholdChoice>,
}

impl RunReport {
    pub fn choice(&self, policy: Policy) -> Option<&ThresholdChoice> {
        self.choices.iter().find(|c| c.policy == policy)
    }
}

/// Results of every stage of one analysis.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub gaps: GapReport,
    pub curves: Vec<SeparabilityCurve>,
    pub features: FeatureTable,
    /// Forest on all features, used for the importance ranking.
    pub ranking: ForestModel,
    pub selection: Option<Selection>,
    pub selected: Vec<String>,
    pub cv: CvResult,
    pub sweep: Vec<SweepRow>,
    /// Forest on the selected features trained on every labeled plot.
    pub model: ForestModel,
    pub predictions: Vec<PlotPrediction>,
    pub summary: PredictionSummary,
    pub report: RunReport,
}

/// Renders one artifact into a byte buffer.
pub type Render<'r> = &'r dyn Fn(&mut Vec<u8>) -> Result<(), BoxError>;

/// Runs every stage in memory.
pub fn analyze(input: &PipelineInput<'_>, params: &AnalysisParams) -> Result<Analysis, PipelineError> {
    analyze_with(input, params, &mut |_, _, _| Ok(()))
}

/// Runs every stage, handing each artifact to `sink` as soon as its stage
/// finishes. The sink receives the stage, a file name and a renderer.
pub fn analyze_with(
    input: &PipelineInput<'_>,
    params: &AnalysisParams,
    sink: &mut dyn FnMut(Stage, &str, Render<'_>) -> Result<(), PipelineError>,
) -> Result<Analysis, PipelineError> {
    params.validate()?;
    let mode = params.sensor_mode;
    let (cube_a, cube_b) = input.cubes(mode);
    for &s in mode.sensors() {
        let present = match s {
            Sensor::A => cube_a.is_some(),
            Sensor::B => cube_b.is_some(),
        };
        if !present {
            return Err(PipelineError::Config(format!("sensor mode {mode} needs a sensor {s} cube")));
        }
    }
    let cubes: Vec<&SceneCube> = cube_a.into_iter().chain(cube_b).collect();
    let plots = input.plots;

    log::info!("gap report over {} plots", plots.len());
    let gaps = gap_statistics(&cubes, plots);
    sink(Stage::Gaps, "gaps.csv", &|buf| Ok(gaps.write_csv(buf)?))?;

    let curves = match input.events {
        Some(events) => {
            let curves = curves_for(events, plots, &cubes, params)?;
            sink(Stage::Separability, "separability.csv", &|buf| Ok(write_curves_csv(buf, &curves)?))?;
            curves
        }
        None => Vec::new(),
    };

    log::info!("extracting features ({mode})");
    let features = build_feature_table(cube_a, cube_b, plots, &params.features).map_err(at_stage(Stage::Features))?;
    sink(Stage::Features, "features.csv", &|buf| Ok(features.write_csv(buf)?))?;

    let labels: HashMap<String, bool> = plots
        .iter()
        .filter_map(|p| p.label.as_bool().map(|l| (p.id.clone(), l)))
        .collect();
    let data = training_data(&features, &labels);
    if data.group_names.len() < 2 {
        return Err(at_stage(Stage::Features)(format!(
            "need at least two labeled plots with interior pixels, found {}",
            data.group_names.len()
        )));
    }

    log::info!("ranking {} features on {} pixels", data.n_features(), data.n_rows());
    let forest = params.forest_params();
    let ranking = ForestModel::train(&data, &forest).map_err(at_stage(Stage::Importance))?;
    sink(Stage::Importance, "importance.csv", &|buf| Ok(ranking.write_importance_csv(buf)?))?;
    let pool = ranking.top_k(params.importance_pool);

    let (selection, selected) = if params.select_features {
        log::info!("forward selection of {} from {} features", params.selection.target_k, pool.len());
        let s = sequential_select(&data, &pool, &params.selection_params()).map_err(at_stage(Stage::Selection))?;
        sink(Stage::Selection, "selection.csv", &|buf| write_selection_csv(&s, buf))?;
        let f = s.features.clone();
        (Some(s), f)
    } else {
        (None, pool)
    };
    let cols: Vec<usize> = selected
        .iter()
        .map(|n| data.names.iter().position(|m| m == n).expect("selected from the data's columns"))
        .collect();
    let sub = data.with_columns(&cols);

    log::info!("plot-holdout cross-validation ({:?})", params.cv.resolve(sub.group_names.len()));
    let cv = cross_validate(&sub, params.cv, &forest).map_err(at_stage(Stage::CrossValidation))?;
    sink(Stage::CrossValidation, "cv_scores.csv", &|buf| Ok(cv.write_csv(buf)?))?;

    let scores: Vec<f64> = cv.plots.iter().map(|p| p.mean_score).collect();
    let truth: Vec<bool> = cv.plots.iter().map(|p| p.label).collect();
    let mut policies = params.policies.clone();
    policies.sort();
    policies.dedup();
    let choices = policies
        .iter()
        .map(|p| match p {
            Policy::MaxAccuracy => max_accuracy_threshold(&scores, &truth),
            Policy::Balanced => balanced_accuracy_threshold(&scores, &truth),
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(at_stage(Stage::Thresholds))?;
    let sweep = threshold_sweep(&scores, &truth);
    sink(Stage::Thresholds, "thresholds.csv", &|buf| Ok(write_confusion_csv(&choices, buf)?))?;
    sink(Stage::Thresholds, "sweep.csv", &|buf| Ok(write_sweep_csv(&sweep, buf)?))?;

    let model = ForestModel::train(&sub, &forest).map_err(at_stage(Stage::FinalModel))?;
    sink(Stage::FinalModel, "model.txt", &|buf| {
        buf.extend_from_slice(model.to_text().as_bytes());
        Ok(())
    })?;

    let predictions = predictions(plots, &features, &cv, &model, &choices)?;
    let summary = prediction_summary(&predictions);
    sink(Stage::Predictions, "predictions.csv", &|buf| Ok(write_predictions_csv(&predictions, buf)?))?;
    sink(Stage::Predictions, "summary.csv", &|buf| Ok(summary.write_table_csv(buf)?))?;
    sink(Stage::Predictions, "crosstab.csv", &|buf| Ok(summary.write_crosstab_csv(buf)?))?;
    sink(Stage::Predictions, "densities.csv", &|buf| Ok(summary.write_densities_csv(buf)?))?;

    let mut plot_ids: Vec<String> = cv.plots.iter().map(|p| p.plot_id.clone()).collect();
    plot_ids.sort();
    let report = RunReport {
        sensor_mode: mode,
        selected_features: selected.clone(),
        plot_ids,
        choices,
    };
    sink(Stage::Report, "report.json", &|buf| Ok(serde_json::to_writer_pretty(buf, &report)?))?;

    Ok(Analysis {
        gaps,
        curves,
        features,
        ranking,
        selection,
        selected,
        cv,
        sweep,
        model,
        predictions,
        summary,
        report,
    })
}

/// Index curves for every burned event, on every sensor in use.
fn curves_for(
    events: &[EventRecord],
    plots: &[Plot],
    cubes: &[&SceneCube],
    params: &AnalysisParams,
) -> Result<Vec<SeparabilityCurve>, PipelineError> {
    let by_id: HashMap<&str, &Plot> = plots.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut burn_events = Vec::new();
    for e in events.iter().filter(|e| e.burned) {
        match by_id.get(e.plot_id.as_str()) {
            Some(&plot) => burn_events.push(Event { plot, date: e.event_date }),
            None => log::warn!("event for unknown plot {} ignored", e.plot_id),
        }
    }
    let mut curves = Vec::new();
    for cube in cubes {
        for src in params.features.sources_for(cube.sensor()) {
            if matches!(src, Source::Index(_)) {
                let c = separability_curve(
                    &burn_events,
                    cube,
                    src,
                    params.separability_max_offset,
                    &params.features.index_params,
                )
                .map_err(at_stage(Stage::Separability))?;
                curves.push(c);
            }
        }
    }
    Ok(curves)
}

/// Labeled interior pixels. Border pixels stay in the feature table but
/// never enter training or plot aggregation.
fn training_data(table: &FeatureTable, labels: &HashMap<String, bool>) -> Dataset {
    let interior = FeatureTable {
        names: table.names.clone(),
        rows: table.rows.iter().filter(|r| !r.border).cloned().collect(),
    };
    Dataset::from_table(&interior, labels)
}

fn write_selection_csv(s: &Selection, buf: &mut Vec<u8>) -> Result<(), BoxError> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["step", "feature", "validation_accuracy"])?;
    for (i, (f, a)) in s.features.iter().zip(&s.accuracy).enumerate() {
        w.write_record([(i + 1).to_string(), f.clone(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Labeled plots carry their out-of-fold score; every other plot is scored
/// by the final model. Calls use the thresholds chosen on the out-of-fold
/// scores.
fn predictions(
    plots: &[Plot],
    table: &FeatureTable,
    cv: &CvResult,
    model: &ForestModel,
    choices: &[ThresholdChoice],
) -> Result<Vec<PlotPrediction>, PipelineError> {
    let oof: HashMap<&str, (f64, usize)> = cv
        .plots
        .iter()
        .map(|p| (p.plot_id.as_str(), (p.mean_score, p.n_pixels)))
        .collect();
    let mut fresh: HashMap<&str, Vec<f64>> = HashMap::new();
    let cols = model.column_map(&table.names).map_err(at_stage(Stage::Predictions))?;
    for row in table.rows.iter().filter(|r| !r.border && !oof.contains_key(r.plot_id.as_str())) {
        let aligned: Vec<f64> = cols.iter().map(|&c| row.values[c]).collect();
        fresh.entry(row.plot_id.as_str()).or_default().push(model.score_aligned(&aligned));
    }
    let means: Vec<(Option<f64>, usize)> = plots
        .iter()
        .map(|p| match oof.get(p.id.as_str()) {
            Some(&(m, n)) => (Some(m), n),
            None => {
                let s = fresh.get(p.id.as_str()).map_or(&[][..], Vec::as_slice);
                (aggregate_plot(s), s.len())
            }
        })
        .collect();
    let thr = |policy| choices.iter().find(|c| c.policy == policy).map(|c| c.threshold);
    let attrs: Vec<PlotAttributes> = plots.iter().map(Plot::attributes).collect();
    let preds = predict_plots(&attrs, &means, thr(Policy::MaxAccuracy), thr(Policy::Balanced));
    Ok(preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub stage: Stage,
    pub sha256: String,
}

/// Contents of `manifest.json` in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub config_hash: String,
    pub seed: u64,
    pub sensor_mode: SensorMode,
    pub version: String,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(io_at(&path))
    }

    pub fn artifact(&self, file: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.file == file)
    }
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub analysis: Analysis,
}

/// Creates `root/<name>-<hash12>`, adding `-2`, `-3`, ... when taken.
pub fn create_run_dir(root: &Path, name: &str, hash: &str) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(root).map_err(io_at(root))?;
    let stem = format!("{name}-{}", &hash[..12.min(hash.len())]);
    for k in 1.. {
        let dir = if k == 1 {
            root.join(&stem)
        } else {
            root.join(format!("{stem}-{k}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_at(&dir)(e)),
        }
    }
    unreachable!("run directory suffixes are unbounded")
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_at(path))?))
}

/// Validates the config, ingests inputs and runs every stage into a new run
/// directory. On failure the manifest stays `incomplete` and names the
/// failing stage.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let hash = config.hash();
    let mut inputs = BTreeMap::new();
    inputs.insert("manifest".to_string(), hash_file(&config.manifest)?);
    inputs.insert("plots".to_string(), hash_file(&config.plots)?);
    if let Some(e) = &config.events {
        inputs.insert("events".to_string(), hash_file(e)?);
    }
    let name = config
        .run_name
        .clone()
        .unwrap_or_else(|| config.analysis.sensor_mode.name().to_string());
    let dir = create_run_dir(&config.output_root, &name, &hash)?;
    log::info!("run directory {}", dir.display());

    let mut manifest = RunManifest {
        status: RunStatus::Incomplete,
        config_hash: hash,
        seed: config.analysis.seed,
        sensor_mode: config.analysis.sensor_mode,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        artifacts: Vec::new(),
        failed_stage: None,
        error: None,
    };
    let config_path = dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(io_at(&config_path))?;
    manifest.write(&dir)?;

    let result = ingest_and_analyze(config, &dir, &mut manifest);
    match result {
        Ok(analysis) => {
            manifest.status = RunStatus::Complete;
            manifest.write(&dir)?;
            Ok(RunOutcome { dir, manifest, analysis })
        }
        Err(e) => {
            manifest.failed_stage = Some(e.stage().unwrap_or(Stage::Config));
            manifest.error = Some(e.to_string());
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

fn ingest_and_analyze(
    config: &RunConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Analysis, PipelineError> {
    let ingested = ingest(&config.manifest).map_err(at_stage(Stage::Ingest))?;
    let plots = read_plots(&config.plots, &ingested.geometry).map_err(at_stage(Stage::Ingest))?;
    let events = match &config.events {
        Some(p) => Some(read_events(p).map_err(at_stage(Stage::Ingest))?),
        None => None,
    };
    let input = PipelineInput {
        cube_a: ingested.cube(Sensor::A),
        cube_b: ingested.cube(Sensor::B),
        plots: &plots,
        events: events.as_deref(),
    };
    analyze_with(&input, &config.analysis, &mut |stage, file, render| {
        let mut buf = Vec::new();
        render(&mut buf).map_err(at_stage(stage))?;
        let path = dir.join(file);
        fs::write(&path, &buf).map_err(io_at(&path))?;
        manifest.artifacts.push(ArtifactRecord {
            file: file.to_string(),
            stage,
            sha256: sha256_hex(&buf),
        });
        manifest.write(dir)
    })
}

/// Reads `report.json` from a completed run directory.
pub fn read_run_report(dir: &Path) -> Result<RunReport, PipelineError> {
    let manifest = RunManifest::read(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(PipelineError::Comparison(format!("run {} is incomplete", dir.display())));
    }
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Comparison(format!("{}: {e}", path.display())))
}

/// One run's accuracies under one policy, with differences from the first run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: Policy,
    pub sensor_mode: SensorMode,
    pub threshold: f64,
    pub accuracy: f64,
    pub burn_accuracy: f64,
    pub no_burn_accuracy: f64,
    pub kappa: f64,
    pub delta_accuracy: f64,
    pub delta_burn_accuracy: f64,
    pub delta_no_burn_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<AblationRow>,
}

impl Comparison {
    pub fn get(&self, mode: SensorMode, policy: Policy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.sensor_mode == mode && r.policy == policy)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Side-by-side accuracies per policy. Differences are relative to the first
/// report. Every report must cover the same plots and policies.
pub fn compare_ablations(reports: &[RunReport]) -> Result<Comparison, PipelineError> {
    let Some(first) = reports.first() else {
        return Err(PipelineError::Comparison("no runs given".into()));
    };
    for r in &reports[1..] {
        if r.plot_ids != first.plot_ids {
            return Err(PipelineError::Comparison(format!(
                "{} run covers {} plots, {} run covers {} plots, and the sets differ",
                first.sensor_mode,
                first.plot_ids.len(),
                r.sensor_mode,
                r.plot_ids.len()
            )));
        }
    }
    let mut rows = Vec::new();
    for base in &first.choices {
        for r in reports {
            let c = r.choice(base.policy).ok_or_else(|| {
                PipelineError::Comparison(format!("{} run lacks the {} policy", r.sensor_mode, base.policy.name()))
            })?;
            let b = &base.counts;
            rows.push(AblationRow {
                policy: base.policy,
                sensor_mode: r.sensor_mode,
                threshold: c.threshold,
                accuracy: c.counts.accuracy(),
                burn_accuracy: c.counts.burn_accuracy(),
                no_burn_accuracy: c.counts.no_burn_accuracy(),
                kappa: c.kappa.value,
                delta_accuracy: c.counts.accuracy() - b.accuracy(),
                delta_burn_accuracy: c.counts.burn_accuracy() - b.burn_accuracy(),
                delta_no_burn_accuracy: c.counts.no_burn_accuracy() - b.no_burn_accuracy(),
            });
        }
    }
    Ok(Comparison { rows })
}

/// Runs the combined, A-only and B-only variants of `config` under
/// `output_root/ablation-<hash12>` and compares them.
pub fn run_ablation(config: &RunConfig) -> Result<(Vec<RunOutcome>, Comparison, PathBuf), PipelineError> {
    config.validate()?;
    let root = create_run_dir(&config.output_root, "ablation", &config.hash())?;
    let mut outcomes = Vec::new();
    for mode in SensorMode::ALL {
        let mut c = config.clone();
        c.output_root = root.clone();
        c.run_name = Some(mode.name().to_string());
        c.analysis.sensor_mode = mode;
        outcomes.push(run_pipeline(&c)?);
    }
    let reports: Vec<RunReport> = outcomes.iter().map(|o| o.analysis.report.clone()).collect();
    let cmp = compare_ablations(&reports)?;
    let path = root.join("comparison.csv");
    let file = fs::File::create(&path).map_err(io_at(&path))?;
    cmp.write_csv(file)
        .map_err(|e| PipelineError::Comparison(format!("{}: {e}", path.display())))?;
    Ok((outcomes, cmp, root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_scenario, ScenarioConfig};

    fn quick(mode: SensorMode) -> AnalysisParams {
        AnalysisParams {
            sensor_mode: mode,
            seed: 3,
            features: FeatureOptions {
                max_pixels_per_plot: Some(6),
                ..Default::default()
            },
            forest: ForestParams {
                n_trees: 15,
                ..Default::default()
            },
            importance_pool: 12,
            selection: SelectionParams {
                target_k: 4,
                forest: ForestParams {
                    n_trees: 5,
                    ..Default::default()
                },
                ..Default::default()
            },
            cv: CvMode::GroupedKFold(5),
            ..Default::default()
        }
    }

    fn scenario() -> crate::synth::Scenario {
        generate(&ScenarioConfig::compact()).unwrap()
    }

    #[test]
    fn analysis_produces_every_stage() {
        let s = scenario();
        let events = s.truth.events();
        let input = PipelineInput {
            cube_a: Some(&s.cube_a),
            cube_b: Some(&s.cube_b),
            plots: &s.plots,
            events: Some(&events),
        };
        let a = analyze(&input, &quick(SensorMode::Combined)).unwrap();
        assert_eq!(a.gaps.sensors.len(), 2);
        assert!(!a.curves.is_empty());
        assert_eq!(a.selected.len(), 4);
        assert_eq!(a.predictions.len(), s.plots.len());
        assert_eq!(a.report.choices.len(), 2);
        assert_eq!(a.cv.plots.len(), a.report.plot_ids.len());
    }

    #[test]
    fn single_sensor_mode_uses_only_that_sensor() {
        let s = scenario();
        let input = PipelineInput {
            cube_a: Some(&s.cube_a),
            cube_b: Some(&s.cube_b),
            plots: &s.plots,
            events: None,
        };
        let a = analyze(&input, &quick(SensorMode::BOnly)).unwrap();
        assert!(a.features.names.iter().all(|n| n.starts_with("B_")));
        assert!(a.ranking.names.iter().all(|n| n.starts_with("B_")));
        assert!(a.curves.is_empty());
    }

    #[test]
    fn missing_cube_is_a_config_error() {
        let s = scenario();
        let input = PipelineInput {
            cube_a: Some(&s.cube_a),
            cube_b: None,
            plots: &s.plots,
            events: None,
        };
        let err = analyze(&input, &quick(SensorMode::Combined)).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
    }

    #[test]
    fn labeled_plot_predictions_use_out_of_fold_scores() {
        let s = scenario();
        let input = PipelineInput {
            cube_a: Some(&s.cube_a),
            cube_b: Some(&s.cube_b),
            plots: &s.plots,
            events: None,
        };
        let a = analyze(&input, &quick(SensorMode::AOnly)).unwrap();
        for p in &a.cv.plots {
            let pred = a.predictions.iter().find(|q| q.plot_id == p.plot_id).unwrap();
            assert_eq!(pred.mean_score, Some(p.mean_score));
        }
    }

    #[test]
    fn comparison_with_itself_has_zero_differences() {
        let s = scenario();
        let input = PipelineInput {
            cube_a: Some(&s.cube_a),
            cube_b: Some(&s.cube_b),
            plots: &s.plots,
            events: None,
        };
        let a = analyze(&input, &quick(SensorMode::AOnly)).unwrap();
        let cmp = compare_ablations(&[a.report.clone(), a.report.clone()]).unwrap();
        assert_eq!(cmp.rows.len(), 4);
        assert!(cmp.rows.iter().all(|r| r.delta_accuracy == 0.0
            && r.delta_burn_accuracy == 0.0
            && r.delta_no_burn_accuracy == 0.0));
    }

    #[test]
    fn mismatched_plot_sets_cannot_be_compared() {
        let report = RunReport {
            sensor_mode: SensorMode::AOnly,
            selected_features: vec![],
            plot_ids: vec!["p1".into(), "p2".into()],
            choices: vec![],
        };
        let mut other = report.clone();
        other.plot_ids.pop();
        assert!(matches!(
            compare_ablations(&[report, other]),
            Err(PipelineError::Comparison(_))
        ));
    }

    #[test]
    fn config_toml_round_trip_and_relative_paths() {
        let mut cfg = RunConfig::new("/data/m.json", "/data/plots.csv");
        cfg.output_root = PathBuf::from("/out");
        cfg.analysis = quick(SensorMode::BOnly);
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());

        let rel = RunConfig::from_toml("manifest = \"m.json\"\nplots = \"p.csv\"\n[analysis]\nsensor_mode = \"A_only\"\n", Path::new("/base")).unwrap();
        assert_eq!(rel.manifest, PathBuf::from("/base/m.json"));
        assert_eq!(rel.analysis.sensor_mode, SensorMode::AOnly);
        assert_eq!(rel.analysis.forest, ForestParams::default());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = RunConfig::from_toml("manifest = \"m\"\nplots = \"p\"\n[analysis]\ntrees = 3\n", Path::new("."));
        assert!(matches!(err, Err(PipelineError::Config(_))));
    }

    #[test]
    fn run_dirs_are_never_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "x", "0123456789abcdef").unwrap();
        let b = create_run_dir(tmp.path(), "x", "0123456789abcdef").unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("x-0123456789ab"));
        assert!(b.ends_with("x-0123456789ab-2"));
    }

    #[test]
    fn run_writes_manifest_and_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let s = scenario();
        let w = write_scenario(&s, &tmp.path().join("scn")).unwrap();
        let mut cfg = RunConfig::new(&w.manifest, &w.plots);
        cfg.events = Some(w.events.clone());
        cfg.output_root = tmp.path().join("runs");
        cfg.analysis = quick(SensorMode::Combined);
        let out = run_pipeline(&cfg).unwrap();
        let m = RunManifest::read(&out.dir).unwrap();
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.seed, 3);
        for f in ["features.csv", "importance.csv", "cv_scores.csv", "predictions.csv", "thresholds.csv", "gaps.csv", "separability.csv"] {
            let rec = m.artifact(f).unwrap_or_else(|| panic!("{f} missing"));
            let bytes = fs::read(out.dir.join(f)).unwrap();
            assert_eq!(rec.sha256, sha256_hex(&bytes));
        }
        assert_eq!(read_run_report(&out.dir).unwrap(), out.analysis.report);
    }

    #[test]
    fn missing_sensor_in_manifest_is_rejected_before_running() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.json");
        fs::write(&m, r#"{"entries": [{"sensor": "A", "date": "2020-01-01", "band": "red", "grid": "g.asc"}]}"#).unwrap();
        let p = tmp.path().join("p.csv");
        fs::write(&p, "plot_id,label,group,wkt_polygon\n").unwrap();
        let mut cfg = RunConfig::new(&m, &p);
        cfg.output_root = tmp.path().join("runs");
        cfg.analysis.sensor_mode = SensorMode::BOnly;
        assert!(matches!(run_pipeline(&cfg), Err(PipelineError::Config(_))));
        assert!(!cfg.output_root.exists());
    }

    #[test]
    fn stage_failure_marks_the_run_incomplete() {
        let tmp = tempfile::tempdir().unwrap();
        let s = scenario();
        let dir = tmp.path().join("scn");
        let w = write_scenario(&s, &dir).unwrap();
        let plots = dir.join("bad_plots.csv");
        fs::write(&plots, "plot_id,label,group,wkt_polygon\np1,burned,none,\"POLYGON ((0 0, 1 0))\"\n").unwrap();
        let mut cfg = RunConfig::new(&w.manifest, plots);
        cfg.output_root = tmp.path().join("runs");
        cfg.analysis = quick(SensorMode::Combined);
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Ingest));
        let run = fs::read_dir(&cfg.output_root).unwrap().next().unwrap().unwrap().path();
        let m = RunManifest::read(&run).unwrap();
        assert_eq!(m.status, RunStatus::Incomplete);
        assert_eq!(m.failed_stage, Some(Stage::Ingest));
    }
}
