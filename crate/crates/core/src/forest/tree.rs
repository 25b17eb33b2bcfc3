use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Fraction of training samples at the leaf that were burned. The
    /// not-burned fraction is `1 - burned`.
    Leaf { burned: f64 },
}

/// Binary CART tree stored as a flat node list with the root at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_fraction(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { burned } => return burned,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// The tree votes burned when more than half of its leaf was burned.
    pub fn vote(&self, x: &[f64]) -> bool {
        self.leaf_fraction(x) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Size-weighted Gini impurity `n * (1 - p^2 - q^2)`.
#[inline]
fn weighted_gini(n: usize, pos: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    2.0 * pos as f64 * (n - pos) as f64 / n as f64
}

pub(crate) struct GrowParams {
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

pub(crate) struct Builder<'a> {
    /// Column-major, imputed training matrix.
    cols: &'a [Vec<f64>],
    y: &'a [bool],
    params: &'a GrowParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    pub importance: Vec<f64>,
    perm: Vec<usize>,
    buf: Vec<(f64, bool)>,
}

struct Best {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl<'a> Builder<'a> {
    pub fn new(cols: &'a [Vec<f64>], y: &'a [bool], params: &'a GrowParams, rng: ChaCha8Rng) -> Self {
        Builder {
            cols,
            y,
            params,
            rng,
            nodes: Vec::new(),
            importance: vec![0.0; cols.len()],
            perm: (0..cols.len()).collect(),
            buf: Vec::new(),
        }
    }

    pub fn build(mut self, samples: &mut [usize]) -> (Tree, Vec<f64>) {
        self.grow(samples, 0);
        (Tree { nodes: self.nodes }, self.importance)
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let n = samples.len();
        let pos = samples.iter().filter(|&&s| self.y[s]).count();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            burned: pos as f64 / n as f64,
        });
        let depth_ok = self.params.max_depth.map_or(true, |d| depth < d);
        if pos == 0 || pos == n || n < 2 * self.params.min_leaf || !depth_ok {
            return id;
        }
        let Some(best) = self.best_split(samples, pos) else {
            return id;
        };
        self.importance[best.feature] += best.decrease;
        let col = &self.cols[best.feature];
        let mut split = 0;
        for i in 0..n {
            if col[samples[i]] <= best.threshold {
                samples.swap(i, split);
                split += 1;
            }
        }
        let (l, r) = samples.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    /// Draws features in random order until `mtry` non-constant ones have
    /// been evaluated.
    fn best_split(&mut self, samples: &[usize], pos: usize) -> Option<Best> {
        let n = samples.len();
        let p = self.cols.len();
        let parent = weighted_gini(n, pos);
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<Best> = None;
        let mut evaluated = 0;
        for k in 0..p {
            if evaluated >= self.params.mtry {
                break;
            }
            let pick = self.rng.gen_range(k..p);
            self.perm.swap(k, pick);
            let f = self.perm[k];
            let col = &self.cols[f];
            self.buf.clear();
            self.buf.extend(samples.iter().map(|&s| (col[s], self.y[s])));
            self.buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.buf[0].0 == self.buf[n - 1].0 {
                continue;
            }
            evaluated += 1;
            let mut left_pos = 0;
            for i in 0..n - 1 {
                left_pos += usize::from(self.buf[i].1);
                let nl = i + 1;
                if nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let (a, b) = (self.buf[i].0, self.buf[i + 1].0);
                if a == b {
                    continue;
                }
                let decrease =
                    parent - weighted_gini(nl, left_pos) - weighted_gini(n - nl, pos - left_pos);
                if decrease > 1e-12 && best.as_ref().map_or(true, |b| decrease > b.decrease) {
                    let mid = a + (b - a) / 2.0;
                    let threshold = if mid < b { mid } else { a };
                    best = Some(Best {
                        feature: f,
                        threshold,
                        decrease,
                    });
                }
            }
        }
        best
    }
}
