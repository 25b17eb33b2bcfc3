use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, ForestError, ForestModel, ForestParams};
use crate::features::FeatureTable;
use crate::scene::Plot;

#[derive(Debug, Error)]
pub enum CvError {
    #[error("fold {fold} leaks holdout data into training: {detail}")]
    Leakage { fold: usize, detail: String },
    #[error("need at least two labeled plots with feature rows, found {0}")]
    TooFewPlots(usize),
    #[error("invalid fold count {0}")]
    BadFolds(usize),
    #[error("fold {fold}: {source}")]
    Training {
        fold: usize,
        #[source]
        source: ForestError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum CvMode {
    /// One plot per fold.
    Loo,
    /// `k` folds of whole plots.
    GroupedKFold(usize),
    /// Leave-one-out up to [`CvMode::AUTO_LOO_LIMIT`] plots, otherwise 20 grouped folds.
    Auto,
}

impl CvMode {
    pub const AUTO_LOO_LIMIT: usize = 200;
    pub const AUTO_K: usize = 20;

    pub fn resolve(self, n_plots: usize) -> CvMode {
        match self {
            CvMode::Auto if n_plots <= Self::AUTO_LOO_LIMIT => CvMode::Loo,
            CvMode::Auto => CvMode::GroupedKFold(Self::AUTO_K),
            other => other,
        }
    }
}

/// Partitions `0..n_groups` into holdout sets. Grouped folds shuffle the
/// groups with `seed` and deal them round-robin.
pub fn make_folds(n_groups: usize, mode: CvMode, seed: u64) -> Result<Vec<Vec<usize>>, CvError> {
    match mode.resolve(n_groups) {
        CvMode::Loo => Ok((0..n_groups).map(|g| vec![g]).collect()),
        CvMode::GroupedKFold(k) => {
            if k < 2 || k > n_groups {
                return Err(CvError::BadFolds(k));
            }
            let mut order: Vec<usize> = (0..n_groups).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut folds = vec![Vec::new(); k];
            for (i, g) in order.into_iter().enumerate() {
                folds[i % k].push(g);
            }
            for f in &mut folds {
                f.sort_unstable();
            }
            Ok(folds)
        }
        CvMode::Auto => unreachable!("resolved above"),
    }
}

fn row_hash(row: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in row {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Fails when a holdout plot id, a holdout `(plot, pixel)` key, or an exact
/// holdout feature vector appears among the training rows. All-missing
/// vectors are not compared.
pub fn check_leakage(
    data: &Dataset,
    fold: usize,
    train: &[usize],
    holdout: &[usize],
) -> Result<(), CvError> {
    let leak = |detail: String| Err(CvError::Leakage { fold, detail });
    let train_plots: HashSet<&str> = train.iter().map(|&r| data.plot_ids[r].as_str()).collect();
    if let Some(&r) = holdout.iter().find(|&&r| train_plots.contains(data.plot_ids[r].as_str())) {
        return leak(format!("plot {} is in both sets", data.plot_ids[r]));
    }
    let train_keys: HashSet<(&str, usize)> = train
        .iter()
        .map(|&r| (data.plot_ids[r].as_str(), data.pixel_ids[r]))
        .collect();
    if let Some(&r) = holdout
        .iter()
        .find(|&&r| train_keys.contains(&(data.plot_ids[r].as_str(), data.pixel_ids[r])))
    {
        return leak(format!("pixel {}/{} is in both sets", data.plot_ids[r], data.pixel_ids[r]));
    }
    let mut by_hash: HashMap<u64, Vec<usize>> = HashMap::new();
    for &r in train {
        let row = data.row(r);
        if row.iter().all(|v| v.is_nan()) {
            continue;
        }
        by_hash.entry(row_hash(row)).or_default().push(r);
    }
    for &h in holdout {
        let row = data.row(h);
        if row.iter().all(|v| v.is_nan()) {
            continue;
        }
        if let Some(cands) = by_hash.get(&row_hash(row)) {
            let same = |t: usize| {
                data.row(t)
                    .iter()
                    .zip(row)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            };
            if let Some(&t) = cands.iter().find(|&&t| same(t)) {
                return leak(format!(
                    "holdout pixel {}/{} duplicates training pixel {}/{}",
                    data.plot_ids[h], data.pixel_ids[h], data.plot_ids[t], data.pixel_ids[t]
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotScore {
    pub plot_id: String,
    pub label: bool,
    pub fold: usize,
    pub n_pixels: usize,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    /// Out-of-fold score per dataset row.
    pub pixel_scores: Vec<f64>,
    /// Fold that held out each row.
    pub pixel_fold: Vec<usize>,
    pub plots: Vec<PlotScore>,
    pub n_folds: usize,
}

impl CvResult {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["plot_id", "label", "fold", "n_pixels", "mean_score"])?;
        for p in &self.plots {
            w.write_record([
                p.plot_id.clone(),
                u8::from(p.label).to_string(),
                p.fold.to_string(),
                p.n_pixels.to_string(),
                p.mean_score.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads plot scores written by [`CvResult::write_csv`].
pub fn read_plot_scores<R: Read>(input: R) -> Result<Vec<PlotScore>, csv::Error> {
    #[derive(Deserialize)]
    struct Raw {
        plot_id: String,
        label: u8,
        fold: usize,
        n_pixels: usize,
        mean_score: f64,
    }
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize::<Raw>()
        .map(|r| {
            r.map(|r| PlotScore {
                plot_id: r.plot_id,
                label: r.label != 0,
                fold: r.fold,
                n_pixels: r.n_pixels,
                mean_score: r.mean_score,
            })
        })
        .collect()
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains one forest per fold on every other plot and scores the held-out
/// plots. Every plot is held out exactly once; each fold passes
/// [`check_leakage`] before training.
pub fn cross_validate(
    data: &Dataset,
    mode: CvMode,
    params: &ForestParams,
) -> Result<CvResult, CvError> {
    let n_groups = data.group_names.len();
    if n_groups < 2 {
        return Err(CvError::TooFewPlots(n_groups));
    }
    let folds = make_folds(n_groups, mode, params.seed)?;
    let by_group = data.rows_by_group();
    let labels = data.group_labels();

    let results: Vec<Vec<(usize, f64)>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let held_set: HashSet<usize> = held.iter().copied().collect();
            let holdout: Vec<usize> = held.iter().flat_map(|&g| by_group[g].iter().copied()).collect();
            let train: Vec<usize> = (0..data.n_rows())
                .filter(|&r| !held_set.contains(&data.groups[r]))
                .collect();
            check_leakage(data, f, &train, &holdout)?;
            let fold_params = ForestParams {
                seed: fold_seed(params.seed, f),
                ..params.clone()
            };
            let model = ForestModel::train_on_rows(data, &train, &fold_params)
                .map_err(|source| CvError::Training { fold: f, source })?;
            Ok(holdout
                .iter()
                .map(|&r| (r, model.score_aligned(data.row(r))))
                .collect())
        })
        .collect::<Result<_, CvError>>()?;

    let mut pixel_scores = vec![f64::NAN; data.n_rows()];
    let mut pixel_fold = vec![usize::MAX; data.n_rows()];
    for (f, scored) in results.iter().enumerate() {
        for &(r, s) in scored {
            pixel_scores[r] = s;
            pixel_fold[r] = f;
        }
    }
    let plots = (0..n_groups)
        .map(|g| {
            let rows = &by_group[g];
            PlotScore {
                plot_id: data.group_names[g].clone(),
                label: labels[g],
                fold: pixel_fold[rows[0]],
                n_pixels: rows.len(),
                mean_score: rows.iter().map(|&r| pixel_scores[r]).sum::<f64>() / rows.len() as f64,
            }
        })
        .collect();
    Ok(CvResult {
        pixel_scores,
        pixel_fold,
        plots,
        n_folds: folds.len(),
    })
}

/// Plot-holdout leave-one-out over the labeled plots. Labeled plots without
/// feature rows are skipped with a warning.
pub fn loocv_plot(
    table: &FeatureTable,
    plots: &[Plot],
    params: &ForestParams,
) -> Result<CvResult, CvError> {
    let labels: HashMap<String, bool> = plots
        .iter()
        .filter_map(|p| p.label.as_bool().map(|l| (p.id.clone(), l)))
        .collect();
    let data = Dataset::from_table(table, &labels);
    let present: HashSet<&str> = data.plot_ids.iter().map(String::as_str).collect();
    for id in labels.keys() {
        if !present.contains(id.as_str()) {
            log::warn!("labeled plot {id} has no feature rows; excluded from cross-validation");
        }
    }
    cross_validate(&data, CvMode::Loo, params)
}
