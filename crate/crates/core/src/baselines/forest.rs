use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::{DecisionTree, TreeParams};
use crate::model::Label;
use crate::util::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of columns each tree may use, at least one column.
    pub feature_fraction: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 50,
            max_depth: 8,
            min_leaf: 1,
            feature_fraction: 0.5,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTree {
    pub tree: DecisionTree,
    /// Ascending column indices this tree was allowed to split on.
    pub features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<ForestTree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[Label], params: &ForestParams) -> RandomForest {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        let k = ((params.feature_fraction.clamp(0.0, 1.0) * d as f64).ceil() as usize).clamp(1.min(d), d);
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            seed: params.seed,
        };
        let trees = (0..params.n_trees.max(1))
            .map(|t| {
                let mut rng = stream_rng(params.seed, &format!("forest-tree-{t}"));
                let rows: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut features = if k == d {
                    (0..d).collect()
                } else {
                    rand::seq::index::sample(&mut rng, d, k).into_vec()
                };
                features.sort_unstable();
                ForestTree {
                    tree: DecisionTree::fit_on(x, y, &rows, &features, &tree_params),
                    features,
                }
            })
            .collect();
        RandomForest { trees }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.tree.predict_proba(row)).sum::<f64>() / self.trees.len() as f64
    }
}
