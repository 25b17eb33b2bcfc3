//! Random forest for burned / not-burned pixel classification, with
//! plot-holdout validation and greedy forward feature selection.

mod cv;
mod select;
mod tree;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureTable;

pub use cv::{check_leakage, cross_validate, loocv_plot, make_folds, read_plot_scores, CvError, CvMode, CvResult, PlotScore};
pub use select::{sequential_select, stratified_plot_split, Selection, SelectionParams};
pub use tree::{Node, Tree};

use tree::{Builder, GrowParams};

const FORMAT_HEADER: &str = "burnmap-forest v1";

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training data has a single class; a classifier needs both burned and not-burned rows")]
    SingleClass,
    #[error("training data is empty")]
    Empty,
    #[error("row is missing features required by the model: {}", .0.join(", "))]
    SchemaMismatch(Vec<String>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model file: {0}")]
    Format(String),
}

/// Labeled pixel rows ready for training. Rows of unlabeled plots are not
/// included.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    x: Vec<f64>,
    pub y: Vec<bool>,
    pub plot_ids: Vec<String>,
    pub pixel_ids: Vec<usize>,
    /// Per-row index into `group_names`, one group per plot.
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        y: Vec<bool>,
        plot_ids: Vec<String>,
        pixel_ids: Vec<usize>,
    ) -> Result<Self, ForestError> {
        let p = names.len();
        if rows.len() != y.len() || rows.len() != plot_ids.len() || rows.len() != pixel_ids.len() {
            return Err(ForestError::Parameter("row, label and id counts differ".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(ForestError::Parameter(format!(
                "row has {} values, schema has {p}",
                bad.len()
            )));
        }
        let mut group_names: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let groups = plot_ids
            .iter()
            .map(|id| {
                *lookup.entry(id.clone()).or_insert_with(|| {
                    group_names.push(id.clone());
                    group_names.len() - 1
                })
            })
            .collect();
        Ok(Dataset {
            names,
            x: rows.into_iter().flatten().collect(),
            y,
            plot_ids,
            pixel_ids,
            groups,
            group_names,
        })
    }

    /// Rows whose plot has a label in `labels` (`true` = burned).
    pub fn from_table(table: &FeatureTable, labels: &HashMap<String, bool>) -> Self {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut plot_ids = Vec::new();
        let mut pixel_ids = Vec::new();
        for r in &table.rows {
            if let Some(&label) = labels.get(&r.plot_id) {
                rows.push(r.values.clone());
                y.push(label);
                plot_ids.push(r.plot_id.clone());
                pixel_ids.push(r.pixel_id);
            }
        }
        Dataset::new(table.names.clone(), rows, y, plot_ids, pixel_ids)
            .expect("feature table rows match their schema")
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.names.len();
        &self.x[i * p..(i + 1) * p]
    }

    /// Copy restricted to the given feature columns, in that order.
    pub fn with_columns(&self, cols: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(self.n_rows() * cols.len());
        for i in 0..self.n_rows() {
            let r = self.row(i);
            x.extend(cols.iter().map(|&c| r[c]));
        }
        Dataset {
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
            x,
            ..self.clone_without_x()
        }
    }

    /// Copy with labels replaced.
    pub fn with_labels(&self, y: Vec<bool>) -> Dataset {
        assert_eq!(y.len(), self.n_rows());
        Dataset { y, ..self.clone() }
    }

    /// Appends one row (used to build leakage probes).
    pub fn push_row(&mut self, values: &[f64], label: bool, plot_id: &str, pixel_id: usize) {
        assert_eq!(values.len(), self.n_features());
        self.x.extend_from_slice(values);
        self.y.push(label);
        self.pixel_ids.push(pixel_id);
        let g = match self.group_names.iter().position(|g| g == plot_id) {
            Some(g) => g,
            None => {
                self.group_names.push(plot_id.to_string());
                self.group_names.len() - 1
            }
        };
        self.groups.push(g);
        self.plot_ids.push(plot_id.to_string());
    }

    /// Row indices per group.
    pub fn rows_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.group_names.len()];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Majority label of each group's rows.
    pub fn group_labels(&self) -> Vec<bool> {
        self.rows_by_group()
            .iter()
            .map(|rows| 2 * rows.iter().filter(|&&r| self.y[r]).count() > rows.len())
            .collect()
    }

    fn clone_without_x(&self) -> Dataset {
        Dataset {
            names: Vec::new(),
            x: Vec::new(),
            y: self.y.clone(),
            plot_ids: self.plot_ids.clone(),
            pixel_ids: self.pixel_ids.clone(),
            groups: self.groups.clone(),
            group_names: self.group_names.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features evaluated per split; `sqrt(p)` when `None`.
    pub max_features: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 300,
            max_features: None,
            min_leaf: 5,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    fn mtry(&self, p: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (p as f64).sqrt().round() as usize)
            .clamp(1, p.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub names: Vec<String>,
    /// Training medians used to fill missing values.
    pub medians: Vec<f64>,
    pub trees: Vec<Tree>,
    /// Normalised total Gini decrease per feature.
    pub importance: Vec<f64>,
    pub params: ForestParams,
    pub oob_accuracy: Option<f64>,
}

fn median_ignoring_nan(values: &mut Vec<f64>) -> f64 {
    values.retain(|v| !v.is_nan());
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl ForestModel {
    pub fn train(data: &Dataset, params: &ForestParams) -> Result<Self, ForestError> {
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        Self::train_on_rows(data, &rows, params)
    }

    /// Trains on a subset of rows. Medians for imputation come from those rows only.
    pub fn train_on_rows(
        data: &Dataset,
        rows: &[usize],
        params: &ForestParams,
    ) -> Result<Self, ForestError> {
        if rows.is_empty() {
            return Err(ForestError::Empty);
        }
        if params.n_trees == 0 {
            return Err(ForestError::Parameter("n_trees must be positive".into()));
        }
        let y: Vec<bool> = rows.iter().map(|&r| data.y[r]).collect();
        let n_pos = y.iter().filter(|v| **v).count();
        if n_pos == 0 || n_pos == y.len() {
            return Err(ForestError::SingleClass);
        }
        let p = data.n_features();
        let mut medians = Vec::with_capacity(p);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
        for j in 0..p {
            let mut raw: Vec<f64> = rows.iter().map(|&r| data.row(r)[j]).collect();
            let med = median_ignoring_nan(&mut raw.clone());
            for v in &mut raw {
                if v.is_nan() {
                    *v = med;
                }
            }
            medians.push(med);
            cols.push(raw);
        }
        let grow = GrowParams {
            mtry: params.mtry(p),
            min_leaf: params.min_leaf,
            max_depth: params.max_depth,
        };
        let mut master = ChaCha8Rng::seed_from_u64(params.seed);
        let seeds: Vec<u64> = (0..params.n_trees).map(|_| master.gen()).collect();
        let n = y.len();
        let grown: Vec<(Tree, Vec<f64>, Vec<(usize, bool)>)> = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut in_bag = vec![false; n];
                let mut samples: Vec<usize> = (0..n)
                    .map(|_| {
                        let i = rng.gen_range(0..n);
                        in_bag[i] = true;
                        i
                    })
                    .collect();
                let (tree, imp) = Builder::new(&cols, &y, &grow, rng).build(&mut samples);
                let mut x = vec![0.0; p];
                let oob = (0..n)
                    .filter(|&i| !in_bag[i])
                    .map(|i| {
                        for (j, c) in cols.iter().enumerate() {
                            x[j] = c[i];
                        }
                        (i, tree.vote(&x))
                    })
                    .collect();
                (tree, imp, oob)
            })
            .collect();

        let mut importance = vec![0.0; p];
        let mut votes = vec![(0usize, 0usize); n];
        let mut trees = Vec::with_capacity(grown.len());
        for (tree, imp, oob) in grown {
            for (a, b) in importance.iter_mut().zip(&imp) {
                *a += b;
            }
            for (i, v) in oob {
                votes[i].0 += usize::from(v);
                votes[i].1 += 1;
            }
            trees.push(tree);
        }
        let total: f64 = importance.iter().sum();
        if total > 0.0 {
            for v in &mut importance {
                *v /= total;
            }
        }
        let scored: Vec<bool> = votes
            .iter()
            .zip(&y)
            .filter(|((_, k), _)| *k > 0)
            .map(|((b, k), &label)| (2 * b > *k) == label)
            .collect();
        let oob_accuracy = (!scored.is_empty())
            .then(|| scored.iter().filter(|v| **v).count() as f64 / scored.len() as f64);

        Ok(ForestModel {
            names: data.names.clone(),
            medians,
            trees,
            importance,
            params: params.clone(),
            oob_accuracy,
        })
    }

    fn imputed(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.medians)
            .map(|(&v, &m)| if v.is_nan() { m } else { v })
            .collect()
    }

    /// Fraction of trees voting burned for a row already in model column order.
    pub fn score_aligned(&self, row: &[f64]) -> f64 {
        let x = self.imputed(row);
        let burned = self.trees.iter().filter(|t| t.vote(&x)).count();
        burned as f64 / self.trees.len() as f64
    }

    /// Per-tree votes for a row in model column order.
    pub fn tree_votes(&self, row: &[f64]) -> Vec<bool> {
        let x = self.imputed(row);
        self.trees.iter().map(|t| t.vote(&x)).collect()
    }

    /// Column positions of the model's features within `names`.
    pub fn column_map(&self, names: &[String]) -> Result<Vec<usize>, ForestError> {
        let lookup: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let map: Vec<usize> = self
            .names
            .iter()
            .map(|n| {
                lookup.get(n.as_str()).copied().unwrap_or_else(|| {
                    missing.push(n.clone());
                    0
                })
            })
            .collect();
        if missing.is_empty() {
            Ok(map)
        } else {
            Err(ForestError::SchemaMismatch(missing))
        }
    }

    /// Fraction of trees voting burned for a row described by `names`.
    pub fn predict_score(&self, names: &[String], row: &[f64]) -> Result<f64, ForestError> {
        let map = self.column_map(names)?;
        let aligned: Vec<f64> = map.iter().map(|&c| row[c]).collect();
        Ok(self.score_aligned(&aligned))
    }

    /// Scores every row of `table`.
    pub fn score_table(&self, table: &FeatureTable) -> Result<Vec<f64>, ForestError> {
        let map = self.column_map(&table.names)?;
        Ok(table
            .rows
            .par_iter()
            .map(|r| {
                let aligned: Vec<f64> = map.iter().map(|&c| r.values[c]).collect();
                self.score_aligned(&aligned)
            })
            .collect())
    }

    /// Feature names ordered by decreasing importance (ties by name).
    pub fn ranked_features(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self
            .names
            .iter()
            .cloned()
            .zip(self.importance.iter().copied())
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn top_k(&self, k: usize) -> Vec<String> {
        self.ranked_features()
            .into_iter()
            .take(k)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn write_importance_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "gini_importance"])?;
        for (name, imp) in self.ranked_features() {
            w.write_record([name, imp.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Versioned plain-text serialisation. Floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(
            s,
            "params {} {} {} {} {}",
            p.n_trees,
            opt(p.max_features),
            p.min_leaf,
            opt(p.max_depth),
            p.seed
        );
        let _ = writeln!(
            s,
            "oob {}",
            self.oob_accuracy.map_or("-".to_string(), |v| v.to_string())
        );
        let _ = writeln!(s, "features {}", self.names.len());
        for ((n, m), imp) in self.names.iter().zip(&self.medians).zip(&self.importance) {
            let _ = writeln!(s, "{n}\t{m}\t{imp}");
        }
        for t in &self.trees {
            let _ = writeln!(s, "tree {}", t.nodes.len());
            for node in &t.nodes {
                match node {
                    Node::Leaf { burned } => {
                        let _ = writeln!(s, "L {burned}");
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(s, "S {feature} {threshold} {left} {right}");
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ForestError> {
        let bad = |m: &str| ForestError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(bad("unrecognised header"));
        }
        fn num<T: std::str::FromStr>(t: Option<&str>) -> Result<T, ForestError> {
            t.and_then(|v| v.parse().ok())
                .ok_or_else(|| ForestError::Format(format!("bad number {t:?}")))
        }
        fn opt(t: Option<&str>) -> Result<Option<usize>, ForestError> {
            match t {
                Some("-") => Ok(None),
                other => num(other).map(Some),
            }
        }
        let mut it = lines.next().ok_or_else(|| bad("missing params"))?.split(' ');
        if it.next() != Some("params") {
            return Err(bad("missing params"));
        }
        let params = ForestParams {
            n_trees: num(it.next())?,
            max_features: opt(it.next())?,
            min_leaf: num(it.next())?,
            max_depth: opt(it.next())?,
            seed: num(it.next())?,
        };
        let oob_line = lines.next().ok_or_else(|| bad("missing oob"))?;
        let oob_accuracy = match oob_line.strip_prefix("oob ") {
            Some("-") => None,
            Some(v) => Some(num(Some(v))?),
            None => return Err(bad("missing oob")),
        };
        let p: usize = num(lines.next().and_then(|l| l.strip_prefix("features ")))?;
        let mut names = Vec::with_capacity(p);
        let mut medians = Vec::with_capacity(p);
        let mut importance = Vec::with_capacity(p);
        for _ in 0..p {
            let line = lines.next().ok_or_else(|| bad("truncated feature list"))?;
            let mut f = line.split('\t');
            names.push(f.next().ok_or_else(|| bad("empty feature line"))?.to_string());
            medians.push(num(f.next())?);
            importance.push(num(f.next())?);
        }
        let mut trees = Vec::with_capacity(params.n_trees);
        while let Some(line) = lines.next() {
            let k: usize = num(line.strip_prefix("tree "))?;
            let mut nodes = Vec::with_capacity(k);
            for _ in 0..k {
                let line = lines.next().ok_or_else(|| bad("truncated tree"))?;
                let mut f = line.split(' ');
                let node = match f.next() {
                    Some("L") => Node::Leaf {
                        burned: num(f.next())?,
                    },
                    Some("S") => Node::Split {
                        feature: num(f.next())?,
                        threshold: num(f.next())?,
                        left: num(f.next())?,
                        right: num(f.next())?,
                    },
                    _ => return Err(bad("unknown node kind")),
                };
                nodes.push(node);
            }
            for node in &nodes {
                if let Node::Split {
                    feature, left, right, ..
                } = node
                {
                    if *feature >= p || *left >= k || *right >= k {
                        return Err(bad("node index out of range"));
                    }
                }
            }
            trees.push(Tree { nodes });
        }
        if trees.len() != params.n_trees {
            return Err(bad("tree count does not match header"));
        }
        Ok(ForestModel {
            names,
            medians,
            trees,
            importance,
            params,
            oob_accuracy,
        })
    }
}
