//! `burnmap` command-line driver.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use burnmap::features::{build_feature_table, FeatureOptions, FeatureTable};
use burnmap::forest::{cross_validate, read_plot_scores, CvMode, Dataset, ForestModel, ForestParams};
use burnmap::indices::IndexId;
use burnmap::pipeline::{
    compare_ablations, read_run_report, run_ablation, run_pipeline, RunConfig, RunStatus, SensorMode,
};
use burnmap::scene::io::{ingest, read_events, read_plot_attributes, read_plots};
use burnmap::scene::{gap_statistics, SceneCube, Sensor};
use burnmap::separability::{separability_curve, write_curves_csv, Event};
use burnmap::synth::{generate, write_scenario, ScenarioConfig};
use burnmap::threshold::{
    balanced_accuracy_threshold, max_accuracy_threshold, plot_means, predict_plots, prediction_summary,
    read_choices_json, threshold_sweep, write_choices_json, write_confusion_csv, write_predictions_csv,
    write_sweep_csv, Policy,
};

#[derive(Parser)]
#[command(name = "burnmap", version, about = "Plot-level crop-residue burn detection")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth and a run config.
    Synth(SynthArgs),
    /// Ingest scenes and write the observation-gap report.
    Ingest(IngestArgs),
    /// Extract the per-pixel feature table.
    Features(FeaturesArgs),
    /// Compute separability curves of each index after burn events.
    Separability(SeparabilityArgs),
    /// Train a forest on a feature table and cross-validate it by plot.
    Train(TrainArgs),
    /// Choose thresholds from cross-validated plot scores.
    Threshold(ThresholdArgs),
    /// Score plots with a trained model and write predictions and summaries.
    Report(ReportArgs),
    /// Run every stage into a new run directory.
    Run(RunArgs),
    /// Run combined, A-only and B-only variants and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; must not exist yet.
    #[arg(long)]
    out: PathBuf,
    /// Scenario TOML; missing keys take default values.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of plots.
    #[arg(long)]
    n_plots: Option<usize>,
    /// Start from the small 40-plot scenario.
    #[arg(long)]
    compact: bool,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Plot table (CSV).
    #[arg(long)]
    plots: PathBuf,
    /// combined, A_only or B_only.
    #[arg(long, default_value = "combined")]
    sensor_mode: SensorMode,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Gap report CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeatureFlags {
    /// Comma-separated indices to compute; all when absent.
    #[arg(long, value_delimiter = ',')]
    indices: Option<Vec<IndexId>>,
    /// Keep border pixels in the table (flagged).
    #[arg(long)]
    include_border: bool,
    /// Keep at most this many evenly spaced pixels per plot.
    #[arg(long)]
    max_pixels: Option<usize>,
}

impl FeatureFlags {
    fn apply(&self, opts: &mut FeatureOptions) {
        if let Some(i) = &self.indices {
            opts.indices = i.clone();
        }
        opts.include_border |= self.include_border;
        if self.max_pixels.is_some() {
            opts.max_pixels_per_plot = self.max_pixels;
        }
    }
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    features: FeatureFlags,
    /// Feature table CSV; must not exist yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SeparabilityArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Event table (CSV: plot_id, event_date, burned).
    #[arg(long)]
    events: PathBuf,
    /// Last whole-day offset after each event.
    #[arg(long, default_value_t = 8)]
    max_offset: i64,
    /// Curve CSV; must not exist yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForestFlags {
    /// Number of trees.
    #[arg(long)]
    trees: Option<usize>,
    /// Minimum rows per leaf.
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Maximum tree depth; unlimited when absent.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Features tried per split; square root of the feature count when absent.
    #[arg(long)]
    max_features: Option<usize>,
}

impl ForestFlags {
    fn apply(&self, p: &mut ForestParams) {
        if let Some(t) = self.trees {
            p.n_trees = t;
        }
        if let Some(m) = self.min_leaf {
            p.min_leaf = m;
        }
        if self.max_depth.is_some() {
            p.max_depth = self.max_depth;
        }
        if self.max_features.is_some() {
            p.max_features = self.max_features;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Feature table written by `features`.
    #[arg(long)]
    features: PathBuf,
    /// Plot table supplying labels.
    #[arg(long)]
    plots: PathBuf,
    #[command(flatten)]
    forest: ForestFlags,
    /// Forest and fold seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `auto`, `loo` or a fold count.
    #[arg(long, default_value = "auto", value_parser = parse_cv)]
    cv: CvMode,
    /// Retrain on the top K features by importance before cross-validation.
    #[arg(long)]
    top: Option<usize>,
    /// Directory for model.txt, importance.csv and cv_scores.csv; must not exist yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Plot scores written by `train` or `run` (cv_scores.csv).
    #[arg(long)]
    scores: PathBuf,
    /// Directory for thresholds.csv, thresholds.json and sweep.csv; must not exist yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// model.txt written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Feature table to score.
    #[arg(long)]
    features: PathBuf,
    /// Plot table supplying labels and groups.
    #[arg(long)]
    plots: PathBuf,
    /// thresholds.json written by `threshold`.
    #[arg(long)]
    thresholds: PathBuf,
    /// Directory for predictions and summary tables; must not exist yet.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
}

/// Flags mirroring the run config; each overrides the config file.
#[derive(Args)]
struct RunFlags {
    /// Run config (TOML). Relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene manifest (JSON); overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Plot table (CSV); overrides the config.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Event table (CSV); enables separability curves.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Root for run directories. Falls back to the config file, then to
    /// $BURNMAP_OUTPUT_ROOT, then to `runs`.
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Prefix of the run directory name; the sensor mode when absent.
    #[arg(long)]
    run_name: Option<String>,
    /// combined, A_only or B_only.
    #[arg(long)]
    sensor_mode: Option<SensorMode>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    features: FeatureFlags,
    #[command(flatten)]
    forest: ForestFlags,
    /// `auto`, `loo` or a fold count.
    #[arg(long, value_parser = parse_cv)]
    cv: Option<CvMode>,
    /// Features ranked by importance that enter selection.
    #[arg(long)]
    pool: Option<usize>,
    /// Number of features forward selection keeps.
    #[arg(long)]
    select_k: Option<usize>,
    /// Use the whole importance pool without forward selection.
    #[arg(long)]
    no_select: bool,
    /// Comma-separated threshold policies (max_accuracy, balanced).
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Option<Vec<Policy>>,
}

impl RunFlags {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => {
                let (Some(m), Some(p)) = (&self.manifest, &self.plots) else {
                    bail!("either --config or both --manifest and --plots are required");
                };
                RunConfig::new(m, p)
            }
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        if let Some(p) = &self.plots {
            cfg.plots = p.clone();
        }
        if self.events.is_some() {
            cfg.events = self.events.clone();
        }
        if let Some(o) = &self.output_root {
            cfg.output_root = o.clone();
        }
        if self.run_name.is_some() {
            cfg.run_name = self.run_name.clone();
        }
        let a = &mut cfg.analysis;
        if let Some(m) = self.sensor_mode {
            a.sensor_mode = m;
        }
        if let Some(s) = self.seed {
            a.seed = s;
        }
        self.features.apply(&mut a.features);
        self.forest.apply(&mut a.forest);
        if let Some(cv) = self.cv {
            a.cv = cv;
        }
        if let Some(p) = self.pool {
            a.importance_pool = p;
        }
        if let Some(k) = self.select_k {
            a.selection.target_k = k;
        }
        if self.no_select {
            a.select_features = false;
        }
        if let Some(p) = &self.policies {
            a.policies = p.clone();
        }
        Ok(cfg)
    }
}

fn parse_cv(s: &str) -> Result<CvMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "auto" => Ok(CvMode::Auto),
        "loo" => Ok(CvMode::Loo),
        k => k
            .parse::<usize>()
            .map(CvMode::GroupedKFold)
            .map_err(|_| format!("expected auto, loo or a fold count, got {s:?}")),
    }
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    [Policy::MaxAccuracy, Policy::Balanced]
        .into_iter()
        .find(|p| p.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown policy {s:?}"))
}

/// Creates `path` for writing, failing if it already exists.
fn create_new(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    File::options()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("creating {} (existing outputs are never overwritten)", path.display()))
}

/// Creates a fresh output directory, failing if it already exists.
fn create_out_dir(dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::create_dir(dir).with_context(|| format!("creating {} (existing outputs are never overwritten)", dir.display()))
}

fn mode_cubes(ingested: &burnmap::scene::io::Ingested, mode: SensorMode) -> Result<(Option<&SceneCube>, Option<&SceneCube>)> {
    let pick = |s: Sensor| -> Result<Option<&SceneCube>> {
        if !mode.uses(s) {
            return Ok(None);
        }
        match ingested.cube(s) {
            Some(c) => Ok(Some(c)),
            None => bail!("sensor mode {mode} needs sensor {s}, which the manifest does not list"),
        }
    };
    let a = pick(Sensor::A)?;
    let b = pick(Sensor::B)?;
    Ok((a, b))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ScenarioConfig::from_toml(&text)?
        }
        None if args.compact => ScenarioConfig::compact(),
        None => ScenarioConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_plots {
        cfg.n_plots = n;
    }
    create_out_dir(&args.out)?;
    let scn = generate(&cfg)?;
    let written = write_scenario(&scn, &args.out)?;
    let mut run = RunConfig::new("manifest.json", "plots.csv");
    run.events = Some(PathBuf::from("events.csv"));
    run.output_root = PathBuf::from("runs");
    run.analysis.seed = cfg.seed;
    let mut f = create_new(&args.out.join("run.toml"))?;
    f.write_all(run.to_toml().as_bytes())?;
    let n_burned = scn.truth.plots.iter().filter(|p| p.burned).count();
    println!(
        "wrote {} plots ({n_burned} burned) to {}; manifest {}",
        scn.plots.len(),
        args.out.display(),
        written.manifest.display()
    );
    Ok(())
}

fn ingest_cmd(args: &IngestArgs) -> Result<()> {
    let ingested = ingest(&args.scene.manifest)?;
    let plots = read_plots(&args.scene.plots, &ingested.geometry)?;
    let (a, b) = mode_cubes(&ingested, args.scene.sensor_mode)?;
    let cubes: Vec<&SceneCube> = a.into_iter().chain(b).collect();
    let report = gap_statistics(&cubes, &plots);
    for s in &report.sensors {
        match &s.summary {
            Some(sum) => eprintln!(
                "sensor {}: mean gap {:.2} d, mean max gap {:.2} d over {} plots ({} flagged)",
                s.sensor,
                sum.mean_of_means,
                sum.mean_of_maxes,
                sum.n_plots,
                s.n_flagged()
            ),
            None => eprintln!("sensor {}: no plot has two usable observations", s.sensor),
        }
    }
    match &args.out {
        Some(p) => report.write_csv(create_new(p)?)?,
        None => report.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn features_cmd(args: &FeaturesArgs) -> Result<()> {
    let ingested = ingest(&args.scene.manifest)?;
    let plots = read_plots(&args.scene.plots, &ingested.geometry)?;
    let (a, b) = mode_cubes(&ingested, args.scene.sensor_mode)?;
    let mut opts = FeatureOptions::default();
    args.features.apply(&mut opts);
    let out = create_new(&args.out)?;
    let table = build_feature_table(a, b, &plots, &opts)?;
    table.write_csv(out)?;
    eprintln!("{} rows x {} features", table.rows.len(), table.names.len());
    Ok(())
}

fn separability_cmd(args: &SeparabilityArgs) -> Result<()> {
    let ingested = ingest(&args.scene.manifest)?;
    let plots = read_plots(&args.scene.plots, &ingested.geometry)?;
    let events = read_events(&args.events)?;
    let (a, b) = mode_cubes(&ingested, args.scene.sensor_mode)?;
    let by_id: HashMap<&str, _> = plots.iter().map(|p| (p.id.as_str(), p)).collect();
    let burn: Vec<Event> = events
        .iter()
        .filter(|e| e.burned)
        .filter_map(|e| by_id.get(e.plot_id.as_str()).map(|&plot| Event { plot, date: e.event_date }))
        .collect();
    let opts = FeatureOptions::default();
    let out = create_new(&args.out)?;
    let mut curves = Vec::new();
    for cube in a.into_iter().chain(b) {
        for src in opts.sources_for(cube.sensor()) {
            if matches!(src, burnmap::indices::Source::Index(_)) {
                curves.push(separability_curve(&burn, cube, src, args.max_offset, &opts.index_params)?);
            }
        }
    }
    write_curves_csv(out, &curves)?;
    eprintln!("{} curves from {} burn events", curves.len(), burn.len());
    Ok(())
}

fn read_table(path: &Path) -> Result<FeatureTable> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(FeatureTable::read_csv(io::BufReader::new(f))?)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let table = read_table(&args.features)?;
    let labels: HashMap<String, bool> = read_plot_attributes(&args.plots)?
        .into_iter()
        .filter_map(|p| p.label.as_bool().map(|l| (p.id, l)))
        .collect();
    let interior = FeatureTable {
        names: table.names.clone(),
        rows: table.rows.into_iter().filter(|r| !r.border).collect(),
    };
    let mut data = Dataset::from_table(&interior, &labels);
    let mut params = ForestParams {
        seed: args.seed,
        ..Default::default()
    };
    args.forest.apply(&mut params);
    create_out_dir(&args.out)?;
    let mut model = ForestModel::train(&data, &params)?;
    if let Some(k) = args.top {
        let keep = model.top_k(k);
        let cols: Vec<usize> = keep
            .iter()
            .map(|n| data.names.iter().position(|m| m == n).expect("ranked names come from the data"))
            .collect();
        model.write_importance_csv(create_new(&args.out.join("importance_all.csv"))?)?;
        data = data.with_columns(&cols);
        model = ForestModel::train(&data, &params)?;
    }
    model.write_importance_csv(create_new(&args.out.join("importance.csv"))?)?;
    create_new(&args.out.join("model.txt"))?.write_all(model.to_text().as_bytes())?;
    let cv = cross_validate(&data, args.cv, &params)?;
    cv.write_csv(create_new(&args.out.join("cv_scores.csv"))?)?;
    eprintln!(
        "trained on {} pixels of {} plots; out-of-bag accuracy {}; {} folds",
        data.n_rows(),
        data.group_names.len(),
        model.oob_accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}")),
        cv.n_folds
    );
    Ok(())
}

fn threshold_cmd(args: &ThresholdArgs) -> Result<()> {
    let f = File::open(&args.scores).with_context(|| format!("opening {}", args.scores.display()))?;
    let plots = read_plot_scores(f)?;
    let scores: Vec<f64> = plots.iter().map(|p| p.mean_score).collect();
    let labels: Vec<bool> = plots.iter().map(|p| p.label).collect();
    let choices = vec![
        max_accuracy_threshold(&scores, &labels)?,
        balanced_accuracy_threshold(&scores, &labels)?,
    ];
    create_out_dir(&args.out)?;
    write_confusion_csv(&choices, create_new(&args.out.join("thresholds.csv"))?)?;
    write_sweep_csv(&threshold_sweep(&scores, &labels), create_new(&args.out.join("sweep.csv"))?)?;
    write_choices_json(&choices, create_new(&args.out.join("thresholds.json"))?)?;
    for c in &choices {
        println!(
            "{}: threshold {:.4} (percentile {:.1}) accuracy {:.3} burn {:.3} no-burn {:.3} kappa {:.3}",
            c.policy.name(),
            c.threshold,
            c.percentile,
            c.counts.accuracy(),
            c.counts.burn_accuracy(),
            c.counts.no_burn_accuracy(),
            c.kappa.value
        );
    }
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let model = ForestModel::from_text(&text)?;
    let table = read_table(&args.features)?;
    let attrs = read_plot_attributes(&args.plots)?;
    let f = File::open(&args.thresholds).with_context(|| format!("opening {}", args.thresholds.display()))?;
    let choices = read_choices_json(io::BufReader::new(f))?;
    let thr = |p| choices.iter().find(|c| c.policy == p).map(|c| c.threshold);
    let scores = model.score_table(&table)?;
    let means = plot_means(&attrs, &table, &scores);
    let preds = predict_plots(&attrs, &means, thr(Policy::MaxAccuracy), thr(Policy::Balanced));
    let summary = prediction_summary(&preds);
    create_out_dir(&args.out)?;
    write_predictions_csv(&preds, create_new(&args.out.join("predictions.csv"))?)?;
    summary.write_table_csv(create_new(&args.out.join("summary.csv"))?)?;
    summary.write_crosstab_csv(create_new(&args.out.join("crosstab.csv"))?)?;
    summary.write_densities_csv(create_new(&args.out.join("densities.csv"))?)?;
    let n = preds.iter().filter(|p| p.mean_score.is_some()).count();
    eprintln!("{n} of {} plots scored", preds.len());
    Ok(())
}

fn run_cmd(args: &RunArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let out = run_pipeline(&cfg)?;
    if out.manifest.status != RunStatus::Complete {
        bail!("run {} did not complete", out.dir.display());
    }
    for c in &out.analysis.report.choices {
        println!(
            "{}: accuracy {:.3} burn {:.3} no-burn {:.3}",
            c.policy.name(),
            c.counts.accuracy(),
            c.counts.burn_accuracy(),
            c.counts.no_burn_accuracy()
        );
    }
    println!("{}", out.dir.display());
    Ok(())
}

fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    let cfg = args.run.config()?;
    let (outcomes, cmp, root) = run_ablation(&cfg)?;
    let reports = outcomes
        .iter()
        .map(|o| read_run_report(&o.dir))
        .collect::<Result<Vec<_>, _>>()?;
    compare_ablations(&reports)?;
    for r in &cmp.rows {
        println!(
            "{:<12} {:<9} accuracy {:.3} burn {:.3} no-burn {:.3} (delta {:+.3})",
            r.policy.name(),
            r.sensor_mode.name(),
            r.accuracy,
            r.burn_accuracy,
            r.no_burn_accuracy,
            r.delta_accuracy
        );
    }
    println!("{}", root.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Features(a) => features_cmd(a),
        Command::Separability(a) => separability_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Threshold(a) => threshold_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}
