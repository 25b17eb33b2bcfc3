use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ForestError, ForestModel, ForestParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Number of features to select.
    pub target_k: usize,
    /// Fraction of plots per class used for training the candidate forests.
    pub train_fraction: f64,
    /// Forest used to score each candidate set.
    pub forest: ForestParams,
    /// Training and validation rows kept per plot, evenly spaced.
    pub max_rows_per_plot: Option<usize>,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            target_k: 30,
            train_fraction: 0.7,
            forest: ForestParams {
                n_trees: 20,
                ..Default::default()
            },
            max_rows_per_plot: Some(16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected feature names in the order they were added.
    pub features: Vec<String>,
    /// Validation pixel accuracy after each addition.
    pub accuracy: Vec<f64>,
}

/// Splits plot groups into training and validation sets, taking
/// `train_fraction` of each class (at least one per side when possible).
pub fn stratified_plot_split(data: &Dataset, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let labels = data.group_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for class in [true, false] {
        let mut g: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        g.shuffle(&mut rng);
        let mut n_train = (g.len() as f64 * train_fraction).round() as usize;
        if g.len() >= 2 {
            n_train = n_train.clamp(1, g.len() - 1);
        }
        train.extend_from_slice(&g[..n_train.min(g.len())]);
        valid.extend_from_slice(&g[n_train.min(g.len())..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}

fn capped_rows(by_group: &[Vec<usize>], groups: &[usize], cap: Option<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    for &g in groups {
        let rows = &by_group[g];
        match cap {
            Some(c) if rows.len() > c && c > 0 => {
                out.extend((0..c).map(|k| rows[k * rows.len() / c]));
            }
            _ => out.extend_from_slice(rows),
        }
    }
    out
}

/// Greedy forward selection from `pool`: each round adds the candidate whose
/// forest gives the highest validation pixel accuracy on a held-out set of
/// plots. Ties keep the earlier candidate in `pool`.
pub fn sequential_select(
    data: &Dataset,
    pool: &[String],
    params: &SelectionParams,
) -> Result<Selection, ForestError> {
    let pool_cols: Vec<usize> = pool
        .iter()
        .map(|n| data.names.iter().position(|m| m == n))
        .collect::<Option<_>>()
        .ok_or_else(|| {
            ForestError::SchemaMismatch(
                pool.iter().filter(|n| !data.names.contains(n)).cloned().collect(),
            )
        })?;
    let (train_g, valid_g) = stratified_plot_split(data, params.train_fraction, params.forest.seed);
    if valid_g.is_empty() {
        return Err(ForestError::Parameter("too few plots for a validation split".into()));
    }
    let by_group = data.rows_by_group();
    let train = capped_rows(&by_group, &train_g, params.max_rows_per_plot);
    let valid = capped_rows(&by_group, &valid_g, params.max_rows_per_plot);

    let mut chosen: Vec<usize> = Vec::new();
    let mut selection = Selection {
        features: Vec::new(),
        accuracy: Vec::new(),
    };
    let target = params.target_k.min(pool_cols.len());
    while chosen.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for &cand in pool_cols.iter().filter(|c| !chosen.contains(c)) {
            let mut cols = chosen.clone();
            cols.push(cand);
            let sub = data.with_columns(&cols);
            let model = ForestModel::train_on_rows(&sub, &train, &params.forest)?;
            let correct = valid
                .iter()
                .filter(|&&r| (model.score_aligned(sub.row(r)) > 0.5) == sub.y[r])
                .count();
            let acc = correct as f64 / valid.len() as f64;
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((cand, acc));
            }
        }
        let (c, acc) = best.expect("pool has unchosen candidates");
        log::debug!("selected {} (validation accuracy {acc:.4})", data.names[c]);
        chosen.push(c);
        selection.features.push(data.names[c].clone());
        selection.accuracy.push(acc);
    }
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn data(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let (mut y, mut ids, mut px) = (Vec::new(), Vec::new(), Vec::new());
        for p in 0..20 {
            let label = p % 2 == 0;
            for k in 0..10 {
                let signal = if label { 1.0 } else { 0.0 } + 0.2 * rng.gen::<f64>();
                rows.push(vec![rng.gen(), signal, rng.gen(), rng.gen()]);
                y.push(label);
                ids.push(format!("p{p}"));
                px.push(k);
            }
        }
        let names = ["n0", "signal", "n2", "n3"].map(String::from).to_vec();
        Dataset::new(names, rows, y, ids, px).unwrap()
    }

    #[test]
    fn informative_feature_is_selected_first() {
        let d = data(1);
        let pool = ["n0", "n2", "signal", "n3"].map(String::from).to_vec();
        let params = SelectionParams {
            target_k: 2,
            forest: ForestParams { n_trees: 10, min_leaf: 2, ..Default::default() },
            ..Default::default()
        };
        let s = sequential_select(&d, &pool, &params).unwrap();
        assert_eq!(s.features[0], "signal");
        assert_eq!(s.features.len(), 2);
        assert!(s.accuracy[0] > 0.95);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = data(2);
        let (t, v) = stratified_plot_split(&d, 0.7, 4);
        assert_eq!(t.len() + v.len(), 20);
        assert!(t.iter().all(|g| !v.contains(g)));
        let labels = d.group_labels();
        assert_eq!(t.iter().filter(|&&g| labels[g]).count(), 7);
    }

    #[test]
    fn unknown_pool_feature_is_an_error() {
        let d = data(3);
        let err = sequential_select(&d, &["nope".to_string()], &SelectionParams::default()).unwrap_err();
        assert!(matches!(err, ForestError::SchemaMismatch(_)));
    }
}
