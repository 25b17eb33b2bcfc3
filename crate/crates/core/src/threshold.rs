//! Plot-level aggregation of pixel scores and threshold policies.
//!
//! A plot is called burned when its mean score is `>= threshold`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{percentile, FeatureTable};
use crate::scene::{Group, Label, PlotAttributes};

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("threshold selection needs both burned and not-burned plots")]
    Degenerate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub false_burn: usize,
    pub false_no_burn: usize,
    pub true_burn: usize,
    pub true_no_burn: usize,
}

impl ConfusionCounts {
    /// Counts for `scores`/`labels` with calls `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = ConfusionCounts::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.true_burn += 1,
                (true, false) => c.false_burn += 1,
                (false, true) => c.false_no_burn += 1,
                (false, false) => c.true_no_burn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.false_burn + self.false_no_burn + self.true_burn + self.true_no_burn
    }

    /// Overall fraction correct.
    pub fn accuracy(&self) -> f64 {
        (self.true_burn + self.true_no_burn) as f64 / self.total() as f64
    }

    /// Recall on burned plots.
    pub fn burn_accuracy(&self) -> f64 {
        self.true_burn as f64 / (self.true_burn + self.false_no_burn) as f64
    }

    /// Recall on not-burned plots.
    pub fn no_burn_accuracy(&self) -> f64 {
        self.true_no_burn as f64 / (self.true_no_burn + self.false_burn) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Set when chance agreement is 1 and kappa is reported as 0.
    pub degenerate: bool,
}

pub fn cohens_kappa(c: &ConfusionCounts) -> Kappa {
    let n = c.total() as f64;
    let p_o = c.accuracy();
    let called_burn = (c.true_burn + c.false_burn) as f64 / n;
    let is_burn = (c.true_burn + c.false_no_burn) as f64 / n;
    let p_e = called_burn * is_burn + (1.0 - called_burn) * (1.0 - is_burn);
    if (1.0 - p_e).abs() < 1e-15 {
        Kappa {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Kappa {
            value: (p_o - p_e) / (1.0 - p_e),
            degenerate: false,
        }
    }
}

/// Neumaier-compensated arithmetic mean; `None` when empty.
pub fn aggregate_plot(scores: &[f64]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in scores {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    Some((sum + comp) / scores.len() as f64)
}

/// Diagnostic alternatives to the plot mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotScoreStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

pub fn plot_score_stats(scores: &[f64]) -> Option<PlotScoreStats> {
    let mean = aggregate_plot(scores)?;
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Some(PlotScoreStats {
        mean,
        median: percentile(&s, 50.0),
        p25: percentile(&s, 25.0),
        p50: percentile(&s, 50.0),
        p75: percentile(&s, 75.0),
        p90: percentile(&s, 90.0),
    })
}

/// Empirical score percentiles 0, 0.5, ..., 100.
pub fn percentile_grid(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    (0..=200).map(|k| percentile(&s, k as f64 * 0.5)).collect()
}

/// Percent of scores strictly below `threshold`.
pub fn percentile_rank(scores: &[f64], threshold: f64) -> f64 {
    100.0 * scores.iter().filter(|&&s| s < threshold).count() as f64 / scores.len() as f64
}

/// Percentile grid plus every observed score plus one value above the
/// maximum, sorted and deduplicated. Covers every distinct call set.
fn candidates(scores: &[f64]) -> Vec<f64> {
    let mut c = percentile_grid(scores);
    c.extend_from_slice(scores);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    c.push(max.next_up());
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    MaxAccuracy,
    Balanced,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::MaxAccuracy => "max_accuracy",
            Policy::Balanced => "balanced",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub policy: Policy,
    /// Threshold in score units.
    pub threshold: f64,
    /// The same threshold as a percentile rank of the scores.
    pub percentile: f64,
    pub counts: ConfusionCounts,
    pub kappa: Kappa,
    /// Crossing point of the interpolated accuracy curves (balanced policy).
    pub interpolated: Option<f64>,
    /// Set when the accuracy curves do not cross on the percentile grid.
    pub fallback: bool,
}

impl ThresholdChoice {
    fn new(policy: Policy, scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let counts = ConfusionCounts::at(scores, labels, threshold);
        ThresholdChoice {
            policy,
            threshold,
            percentile: percentile_rank(scores, threshold),
            counts,
            kappa: cohens_kappa(&counts),
            interpolated: None,
            fallback: false,
        }
    }
}

fn check_labels(labels: &[bool]) -> Result<(), ThresholdError> {
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        Ok(())
    } else {
        Err(ThresholdError::Degenerate)
    }
}

/// Highest-accuracy threshold; ties go to the lowest threshold.
pub fn max_accuracy_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice, ThresholdError> {
    check_labels(labels)?;
    let mut best: Option<(f64, usize)> = None;
    for t in candidates(scores) {
        let c = ConfusionCounts::at(scores, labels, t);
        let correct = c.true_burn + c.true_no_burn;
        if best.map_or(true, |(_, b)| correct > b) {
            best = Some((t, correct));
        }
    }
    let (t, _) = best.expect("candidate list is never empty");
    Ok(ThresholdChoice::new(Policy::MaxAccuracy, scores, labels, t))
}

/// Writes chosen thresholds as JSON for later scoring runs.
pub fn write_choices_json<W: Write>(choices: &[ThresholdChoice], out: W) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, choices)
}

pub fn read_choices_json<R: std::io::Read>(input: R) -> serde_json::Result<Vec<ThresholdChoice>> {
    serde_json::from_reader(input)
}

fn gap(c: &ConfusionCounts) -> f64 {
    c.burn_accuracy() - c.no_burn_accuracy()
}

/// Threshold where burned and not-burned accuracy meet.
///
/// The accuracy curves are interpolated linearly over the percentile grid to
/// locate the crossing. The returned threshold is the candidate with the
/// smallest accuracy gap, ties resolved by percentile-rank distance to the
/// crossing and then toward the lower threshold.
pub fn balanced_accuracy_threshold(
    scores: &[f64],
    labels: &[bool],
) -> Result<ThresholdChoice, ThresholdError> {
    check_labels(labels)?;
    let grid = percentile_grid(scores);
    let gaps: Vec<f64> = grid
        .iter()
        .map(|&t| gap(&ConfusionCounts::at(scores, labels, t)))
        .collect();
    // Crossing located in percentile units so that it depends only on score order.
    let mut crossing = None;
    for i in 0..grid.len() - 1 {
        let (a, b) = (gaps[i], gaps[i + 1]);
        if a == 0.0 {
            crossing = Some(i as f64 * 0.5);
            break;
        }
        if a > 0.0 && b <= 0.0 {
            crossing = Some((i as f64 + a / (a - b)) * 0.5);
            break;
        }
    }
    if crossing.is_none() {
        log::warn!("accuracy curves do not cross on the percentile grid; using the smallest gap");
    }
    let target_rank = crossing;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut best: Option<(f64, f64, f64)> = None;
    for t in candidates(scores) {
        let g = gap(&ConfusionCounts::at(scores, labels, t)).abs();
        let d = target_rank.map_or(0.0, |r| (percentile_rank(scores, t) - r).abs());
        let better = match best {
            None => true,
            Some((_, bg, bd)) => g < bg || (g == bg && d < bd),
        };
        if better {
            best = Some((t, g, d));
        }
    }
    let (t, _, _) = best.expect("candidate list is never empty");
    let mut choice = ThresholdChoice::new(Policy::Balanced, scores, labels, t);
    choice.interpolated = crossing.map(|p| percentile(&sorted, p));
    choice.fallback = crossing.is_none();
    Ok(choice)
}

/// One row of the threshold sweep over the percentile grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub percentile: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub burn_accuracy: f64,
    pub no_burn_accuracy: f64,
    pub kappa: f64,
}

pub fn threshold_sweep(scores: &[f64], labels: &[bool]) -> Vec<SweepRow> {
    percentile_grid(scores)
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let c = ConfusionCounts::at(scores, labels, t);
            SweepRow {
                percentile: k as f64 * 0.5,
                threshold: t,
                accuracy: c.accuracy(),
                burn_accuracy: c.burn_accuracy(),
                no_burn_accuracy: c.no_burn_accuracy(),
                kappa: cohens_kappa(&c).value,
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPrediction {
    pub plot_id: String,
    /// `None` when the plot has no scored pixel.
    pub mean_score: Option<f64>,
    pub n_pixels: usize,
    pub call_max: Option<bool>,
    pub call_balanced: Option<bool>,
    pub label: Label,
    pub group: Group,
}

/// Mean of non-border, non-missing pixel scores per plot, in `plots` order.
pub fn plot_means(plots: &[PlotAttributes], table: &FeatureTable, pixel_scores: &[f64]) -> Vec<(Option<f64>, usize)> {
    let mut per_plot: HashMap<&str, Vec<f64>> = HashMap::new();
    for (row, &s) in table.rows.iter().zip(pixel_scores) {
        if !row.border && !s.is_nan() {
            per_plot.entry(row.plot_id.as_str()).or_default().push(s);
        }
    }
    plots
        .iter()
        .map(|p| {
            let scores = per_plot.get(p.id.as_str()).map_or(&[][..], Vec::as_slice);
            if scores.is_empty() {
                log::warn!("plot {} has no scored pixels; prediction missing", p.id);
            }
            (aggregate_plot(scores), scores.len())
        })
        .collect()
}

/// Applies each policy's threshold to per-plot mean scores. A policy without
/// a threshold leaves its calls missing.
pub fn predict_plots(
    plots: &[PlotAttributes],
    means: &[(Option<f64>, usize)],
    max_threshold: Option<f64>,
    balanced_threshold: Option<f64>,
) -> Vec<PlotPrediction> {
    plots
        .iter()
        .zip(means)
        .map(|(p, &(m, n))| PlotPrediction {
            plot_id: p.id.clone(),
            mean_score: m,
            n_pixels: n,
            call_max: m.zip(max_threshold).map(|(m, t)| m >= t),
            call_balanced: m.zip(balanced_threshold).map(|(m, t)| m >= t),
            label: p.label,
            group: p.group,
        })
        .collect()
}

fn opt_bool(v: Option<bool>) -> String {
    v.map_or(String::new(), |b| u8::from(b).to_string())
}

pub fn write_predictions_csv<W: Write>(preds: &[PlotPrediction], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["plot_id", "mean_score", "call_max", "call_balanced", "label", "group"])?;
    for p in preds {
        w.write_record([
            p.plot_id.clone(),
            p.mean_score.map_or(String::new(), |m| m.to_string()),
            opt_bool(p.call_max),
            opt_bool(p.call_balanced),
            p.label.name().to_string(),
            p.group.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_confusion_csv<W: Write>(choices: &[ThresholdChoice], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "threshold",
        "threshold_percentile",
        "false_burn",
        "false_no_burn",
        "true_burn",
        "true_no_burn",
        "accuracy",
        "burn_accuracy",
        "no_burn_accuracy",
        "kappa",
    ])?;
    for c in choices {
        let k = &c.counts;
        w.write_record([
            c.policy.name().to_string(),
            c.threshold.to_string(),
            c.percentile.to_string(),
            k.false_burn.to_string(),
            k.false_no_burn.to_string(),
            k.true_burn.to_string(),
            k.true_no_burn.to_string(),
            format!("{:.4}", k.accuracy()),
            format!("{:.4}", k.burn_accuracy()),
            format!("{:.4}", k.no_burn_accuracy()),
            format!("{:.4}", c.kappa.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Describe {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Describe {
    /// Sample statistics (`n - 1` denominator); all zero for no values.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Describe::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Describe {
            n,
            mean,
            sd,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    /// `call_max`, `call_balanced` or `group`.
    pub split: String,
    pub level: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub density: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub score: Describe,
    pub call_max: Describe,
    pub call_balanced: Describe,
    /// `crosstab[balanced][max]` plot counts.
    pub crosstab: [[usize; 2]; 2],
    pub densities: Vec<DensityRow>,
}

pub const DENSITY_BINS: usize = 20;

fn densities(split: &str, level: &str, scores: &[f64]) -> Vec<DensityRow> {
    let w = 1.0 / DENSITY_BINS as f64;
    let mut counts = [0usize; DENSITY_BINS];
    for &s in scores {
        counts[((s / w) as usize).min(DENSITY_BINS - 1)] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| DensityRow {
            split: split.to_string(),
            level: level.to_string(),
            bin_lo: b as f64 * w,
            bin_hi: (b + 1) as f64 * w,
            density: if scores.is_empty() {
                0.0
            } else {
                c as f64 / (scores.len() as f64 * w)
            },
        })
        .collect()
}

/// Summaries over plots with a prediction: score and call statistics, the
/// cross-tabulation of the two policies, and score histograms (densities)
/// split by each policy's call and by group.
pub fn prediction_summary(preds: &[PlotPrediction]) -> PredictionSummary {
    let scored: Vec<&PlotPrediction> = preds.iter().filter(|p| p.mean_score.is_some()).collect();
    if scored.is_empty() {
        return PredictionSummary::default();
    }
    let score = |p: &&PlotPrediction| p.mean_score.unwrap_or(f64::NAN);
    let scores: Vec<f64> = scored.iter().map(score).collect();
    let as_f = |v: Option<bool>| f64::from(u8::from(v.unwrap_or(false)));
    let mut crosstab = [[0usize; 2]; 2];
    for p in &scored {
        crosstab[usize::from(p.call_balanced.unwrap_or(false))][usize::from(p.call_max.unwrap_or(false))] += 1;
    }
    let mut dens = Vec::new();
    for (split, get) in [
        ("call_max", (|p: &PlotPrediction| p.call_max) as fn(&PlotPrediction) -> Option<bool>),
        ("call_balanced", |p: &PlotPrediction| p.call_balanced),
    ] {
        for level in [false, true] {
            let s: Vec<f64> = scored.iter().filter(|p| get(p) == Some(level)).map(score).collect();
            dens.extend(densities(split, &u8::from(level).to_string(), &s));
        }
    }
    let mut by_group: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
    for p in &scored {
        by_group.entry(p.group).or_default().push(score(p));
    }
    for (g, s) in by_group {
        dens.extend(densities("group", g.name(), &s));
    }
    PredictionSummary {
        score: Describe::of(&scores),
        call_max: Describe::of(&scored.iter().map(|p| as_f(p.call_max)).collect::<Vec<_>>()),
        call_balanced: Describe::of(&scored.iter().map(|p| as_f(p.call_balanced)).collect::<Vec<_>>()),
        crosstab,
        densities: dens,
    }
}

impl PredictionSummary {
    pub fn write_table_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variable", "n", "mean", "sd", "min", "max"])?;
        for (name, d) in [
            ("score", &self.score),
            ("call_max", &self.call_max),
            ("call_balanced", &self.call_balanced),
        ] {
            w.write_record([
                name.to_string(),
                d.n.to_string(),
                d.mean.to_string(),
                d.sd.to_string(),
                d.min.to_string(),
                d.max.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_crosstab_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["call_balanced", "call_max_0", "call_max_1"])?;
        for b in 0..2 {
            w.write_record([
                b.to_string(),
                self.crosstab[b][0].to_string(),
                self.crosstab[b][1].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_densities_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.densities {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Plot scores and labels reproducing a given max-accuracy confusion matrix:
/// low burned, low unburned, high burned, high unburned, each spread over
/// its own band.
pub fn table_max_accuracy_scores() -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (n, lo, hi, label) in [
        (38, 0.05, 0.15, true),
        (151, 0.20, 0.40, false),
        (404, 0.50, 0.80, true),
        (88, 0.85, 0.99, false),
    ] {
        for i in 0..n {
            scores.push(lo + (hi - lo) * i as f64 / (n - 1) as f64);
            labels.push(label);
        }
    }
    (scores, labels)
}

/// Plot scores and labels reproducing a given balanced-policy confusion
/// matrix. Tied clusters make every other threshold widen the accuracy gap.
pub fn table_balanced_scores() -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut spread = |n: usize, lo: f64, hi: f64, label: bool| {
        for i in 0..n {
            scores.push(if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 });
            labels.push(label);
        }
    };
    spread(182, 0.05, 0.25, false);
    spread(95, 0.30, 0.30, true);
    spread(20, 0.60, 0.60, true);
    spread(10, 0.60, 0.60, false);
    spread(47, 0.62, 0.80, false);
    spread(327, 0.65, 0.95, true);
    (scores, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 0.005
    }

    #[test]
    fn means_of_trivial_sets() {
        assert_eq!(aggregate_plot(&[0.8; 7]), Some(0.8));
        assert_eq!(aggregate_plot(&[0.0, 1.0]), Some(0.5));
        assert_eq!(aggregate_plot(&[]), None);
    }

    #[test]
    fn max_accuracy_table_counts() {
        let (s, l) = table_max_accuracy_scores();
        let c = max_accuracy_threshold(&s, &l).unwrap();
        assert_eq!(
            c.counts,
            ConfusionCounts { false_burn: 88, false_no_burn: 38, true_burn: 404, true_no_burn: 151 }
        );
        assert_eq!(c.counts.accuracy(), 555.0 / 681.0);
        assert!(close(c.counts.burn_accuracy(), 0.91));
        assert!(close(c.counts.no_burn_accuracy(), 0.63));
        // Lowest threshold reaching the optimum.
        assert!(c.threshold > 0.40 && c.threshold <= 0.50);
    }

    #[test]
    fn kappa_argmax_matches_accuracy_argmax() {
        let (s, l) = table_max_accuracy_scores();
        let sweep = threshold_sweep(&s, &l);
        let best_acc = sweep.iter().map(|r| r.accuracy).fold(0.0, f64::max);
        let best_kappa = sweep.iter().map(|r| r.kappa).fold(f64::MIN, f64::max);
        for r in &sweep {
            assert_eq!(r.accuracy == best_acc, r.kappa == best_kappa, "{r:?}");
        }
    }

    #[test]
    fn balanced_table_counts() {
        let (s, l) = table_balanced_scores();
        let c = balanced_accuracy_threshold(&s, &l).unwrap();
        assert_eq!(
            c.counts,
            ConfusionCounts { false_burn: 57, false_no_burn: 95, true_burn: 347, true_no_burn: 182 }
        );
        assert!(close(c.counts.accuracy(), 0.78));
        assert!(close(c.counts.burn_accuracy(), 0.79));
        assert!(close(c.counts.no_burn_accuracy(), 0.76));
    }

    #[test]
    fn mirrored_scores_balance_at_half() {
        let burned: Vec<f64> = (0..50).map(|i| 0.3 + 0.6 * i as f64 / 49.0).collect();
        let mut s: Vec<f64> = burned.iter().map(|b| 1.0 - b).collect();
        s.extend(&burned);
        let l: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let c = balanced_accuracy_threshold(&s, &l).unwrap();
        assert!((c.threshold - 0.5).abs() < 0.02, "{c:?}");
        assert_eq!(c.counts.burn_accuracy(), c.counts.no_burn_accuracy());
        assert!((c.interpolated.unwrap() - 0.5).abs() < 0.02, "{c:?}");
    }

    #[test]
    fn single_label_is_degenerate() {
        assert_eq!(max_accuracy_threshold(&[0.1, 0.2], &[true, true]), Err(ThresholdError::Degenerate));
        assert_eq!(balanced_accuracy_threshold(&[0.1, 0.2], &[false, false]), Err(ThresholdError::Degenerate));
    }

    #[test]
    fn kappa_cases() {
        let perfect = ConfusionCounts { true_burn: 5, true_no_burn: 5, ..Default::default() };
        assert_eq!(cohens_kappa(&perfect).value, 1.0);
        // Calls independent of labels: 50% called burned in each class.
        let indep = ConfusionCounts { true_burn: 30, false_no_burn: 30, false_burn: 20, true_no_burn: 20 };
        assert!(cohens_kappa(&indep).value.abs() < 1e-12);
        let all_one = ConfusionCounts { true_burn: 10, ..Default::default() };
        assert!(cohens_kappa(&all_one).degenerate);
    }

    fn pred(score: f64, max: bool, bal: bool, group: Group) -> PlotPrediction {
        PlotPrediction {
            plot_id: "p".into(),
            mean_score: Some(score),
            n_pixels: 1,
            call_max: Some(max),
            call_balanced: Some(bal),
            label: Label::Unlabeled,
            group,
        }
    }

    #[test]
    fn summary_of_all_burned() {
        let preds = vec![pred(0.9, true, true, Group::Treatment), pred(0.7, true, true, Group::Control)];
        let s = prediction_summary(&preds);
        assert_eq!(s.crosstab, [[0, 0], [0, 2]]);
        assert_eq!(s.call_max.mean, 1.0);
        assert!((s.score.mean - 0.8).abs() < 1e-12);
        let treat: f64 = s
            .densities
            .iter()
            .filter(|d| d.split == "group" && d.level == "treatment")
            .map(|d| d.density * (d.bin_hi - d.bin_lo))
            .sum();
        assert!((treat - 1.0).abs() < 1e-12);
        assert_eq!(prediction_summary(&[]), PredictionSummary::default());
    }

    fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)
            .prop_filter("both labels", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
            .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn compensated_mean_matches_exact_oracle(v in prop::collection::vec(0.0f64..1.0, 1..1000)) {
            // Scores scaled to 2^-40 granularity sum exactly in integers.
            let q: Vec<f64> = v.iter().map(|x| (x * 2f64.powi(40)).floor() / 2f64.powi(40)).collect();
            let exact: i128 = q.iter().map(|x| (x * 2f64.powi(40)) as i128).sum();
            let oracle = exact as f64 / 2f64.powi(40) / q.len() as f64;
            prop_assert!((aggregate_plot(&q).unwrap() - oracle).abs() < 1e-12);
        }

        #[test]
        fn max_policy_matches_exhaustive_scan((s, l) in labeled_scores()) {
            let c = max_accuracy_threshold(&s, &l).unwrap();
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            let mut positions: Vec<f64> = sorted.clone();
            positions.push(f64::INFINITY);
            let best = positions
                .iter()
                .map(|&t| { let k = ConfusionCounts::at(&s, &l, t); k.true_burn + k.true_no_burn })
                .max()
                .unwrap();
            prop_assert_eq!(c.counts.true_burn + c.counts.true_no_burn, best);
        }

        #[test]
        fn balanced_gap_beats_every_grid_point((s, l) in labeled_scores()) {
            let c = balanced_accuracy_threshold(&s, &l).unwrap();
            let g = gap(&c.counts).abs();
            for t in percentile_grid(&s) {
                prop_assert!(g <= gap(&ConfusionCounts::at(&s, &l, t)).abs() + 1e-15);
            }
            let m = max_accuracy_threshold(&s, &l).unwrap();
            prop_assert!(m.counts.accuracy() >= c.counts.accuracy());
        }

        #[test]
        fn raising_threshold_never_adds_burn_calls((s, l) in labeled_scores(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let cl = ConfusionCounts::at(&s, &l, lo);
            let ch = ConfusionCounts::at(&s, &l, hi);
            prop_assert!(ch.true_burn + ch.false_burn <= cl.true_burn + cl.false_burn);
        }

        #[test]
        fn policies_depend_only_on_order((s, l) in labeled_scores()) {
            let t: Vec<f64> = s.iter().map(|x| x.powi(3) * 0.5 + 0.1).collect();
            let calls = |scores: &[f64], thr: f64| scores.iter().map(|&x| x >= thr).collect::<Vec<_>>();
            let (m1, m2) = (max_accuracy_threshold(&s, &l).unwrap(), max_accuracy_threshold(&t, &l).unwrap());
            prop_assert_eq!(calls(&s, m1.threshold), calls(&t, m2.threshold));
            let (b1, b2) = (balanced_accuracy_threshold(&s, &l).unwrap(), balanced_accuracy_threshold(&t, &l).unwrap());
            prop_assert_eq!(calls(&s, b1.threshold), calls(&t, b2.threshold));
        }

        #[test]
        fn balanced_above_max_implies_containment((s, l) in labeled_scores()) {
            let m = max_accuracy_threshold(&s, &l).unwrap();
            let b = balanced_accuracy_threshold(&s, &l).unwrap();
            if b.threshold >= m.threshold {
                for &x in &s {
                    prop_assert!(!(x >= b.threshold) || x >= m.threshold);
                }
            }
        }
    }
}
