//! Greedy binary CART on Gini impurity.
//!
//! Candidate thresholds are midpoints between consecutive distinct feature
//! values. A node splits on the best candidate unless it is pure, at the
//! depth limit, or every candidate would leave a child below `min_leaf`.
//! Zero-gain splits are accepted, which is what lets XOR-like structure be
//! learned. Ties keep the lowest feature index, then the lowest threshold.

use serde::{Deserialize, Serialize};

use crate::model::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        negatives: usize,
        positives: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

pub fn gini(positives: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = positives as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

const GAIN_TIE: f64 = 1e-12;

/// Best Gini split over `features` for the given rows.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[Label],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let n = rows.len();
    let total_pos = rows.iter().filter(|&&r| y[r].is_positive()).count();
    let parent = gini(total_pos, n);
    let min_leaf = min_leaf.max(1);
    let mut best: Option<SplitCandidate> = None;
    let mut sorted: Vec<(f64, bool)> = Vec::with_capacity(n);
    for &f in features {
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| (x[r][f], y[r].is_positive())));
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_pos = 0;
        for i in 0..n.saturating_sub(1) {
            left_pos += usize::from(sorted[i].1);
            if sorted[i].0 == sorted[i + 1].0 {
                continue;
            }
            let left_n = i + 1;
            let right_n = n - left_n;
            if left_n < min_leaf || right_n < min_leaf {
                continue;
            }
            let weighted = (left_n as f64 * gini(left_pos, left_n)
                + right_n as f64 * gini(total_pos - left_pos, right_n))
                / n as f64;
            let gain = parent - weighted;
            if best.is_none_or(|b| gain > b.gain + GAIN_TIE) {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0),
                    gain,
                });
            }
        }
    }
    best
}

impl DecisionTree {
    pub fn fit(x: &[Vec<f64>], y: &[Label], params: &TreeParams) -> DecisionTree {
        let rows: Vec<usize> = (0..x.len()).collect();
        let features: Vec<usize> = (0..x.first().map_or(0, Vec::len)).collect();
        Self::fit_on(x, y, &rows, &features, params)
    }

    /// Fits on a row sample (repeats allowed) restricted to `features`,
    /// which must be ascending for the tie-breaking rule to hold.
    pub fn fit_on(x: &[Vec<f64>], y: &[Label], rows: &[usize], features: &[usize], params: &TreeParams) -> DecisionTree {
        let mut tree = DecisionTree { nodes: Vec::new() };
        tree.grow(x, y, rows.to_vec(), features, 0, params);
        tree
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[Label], rows: Vec<usize>, features: &[usize], depth: usize, params: &TreeParams) -> usize {
        let positives = rows.iter().filter(|&&r| y[r].is_positive()).count();
        let negatives = rows.len() - positives;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { negatives, positives });
        if positives == 0 || negatives == 0 || depth >= params.max_depth {
            return id;
        }
        let Some(split) = best_split(x, y, &rows, features, params.min_leaf) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][split.feature] <= split.threshold);
        let left = self.grow(x, y, l, features, depth + 1, params);
        let right = self.grow(x, y, r, features, depth + 1, params);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    fn leaf_for(&self, row: &[f64]) -> &Node {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        match self.leaf_for(row) {
            Node::Leaf { negatives, positives } => {
                let n = negatives + positives;
                if n == 0 {
                    0.5
                } else {
                    *positives as f64 / n as f64
                }
            }
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }
}
