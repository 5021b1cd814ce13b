//! Classical baselines over bag-of-codes features: CART decision tree,
//! L2-regularized logistic regression and random forest, trained either on
//! the full training split or on a six-row few-shot sample.

pub mod features;
pub mod forest;
pub mod logreg;
pub mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use features::{code_universe, featurize, FeatureMatrix};
pub use forest::{ForestParams, RandomForest};
pub use logreg::{loss_and_gradient, LogRegParams, LogisticModel};
pub use tree::{best_split, DecisionTree, Node, SplitCandidate, TreeParams};

use crate::error::{Error, Result};
use crate::model::{Label, MedicalCode};
use crate::util::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Tree,
    LogReg,
    Forest,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Tree, BaselineKind::LogReg, BaselineKind::Forest];

    pub fn display_name(self) -> &'static str {
        match self {
            BaselineKind::Tree => "Decision Tree",
            BaselineKind::LogReg => "Logistic Regression",
            BaselineKind::Forest => "Random Forest",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Tree => "tree",
            BaselineKind::LogReg => "logreg",
            BaselineKind::Forest => "forest",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(BaselineKind::Tree),
            "logreg" => Ok(BaselineKind::LogReg),
            "forest" => Ok(BaselineKind::Forest),
            other => Err(Error::Invalid(format!("unknown baseline kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineHyper {
    pub tree: TreeParams,
    pub logreg: LogRegParams,
    pub forest: ForestParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainedModel {
    Tree { params: TreeParams, tree: DecisionTree },
    LogReg { params: LogRegParams, model: LogisticModel },
    Forest { params: ForestParams, forest: RandomForest },
}

impl TrainedModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            TrainedModel::Tree { .. } => BaselineKind::Tree,
            TrainedModel::LogReg { .. } => BaselineKind::LogReg,
            TrainedModel::Forest { .. } => BaselineKind::Forest,
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        match self {
            TrainedModel::Tree { tree, .. } => tree.predict_proba(row),
            TrainedModel::LogReg { model, .. } => model.predict_proba(row),
            TrainedModel::Forest { forest, .. } => forest.predict_proba(row),
        }
    }

    pub fn predict(&self, row: &[f64]) -> Label {
        Label::from_probability(self.predict_proba(row))
    }

    pub fn accuracy(&self, x: &FeatureMatrix) -> f64 {
        if x.n_rows() == 0 {
            return 0.0;
        }
        let ok = x.rows.iter().zip(&x.labels).filter(|(r, l)| self.predict(r) == **l).count();
        ok as f64 / x.n_rows() as f64
    }
}

fn check_trainable(x: &FeatureMatrix) -> Result<()> {
    if x.n_rows() == 0 {
        return Err(Error::Invalid("training matrix is empty".into()));
    }
    if x.rows.len() != x.labels.len() {
        return Err(Error::Invalid("row and label counts differ".into()));
    }
    Ok(())
}

pub fn train_logreg(x: &FeatureMatrix, params: &LogRegParams) -> Result<TrainedModel> {
    check_trainable(x)?;
    let pos = x.labels.iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == x.n_rows() {
        return Err(Error::Invalid("logistic regression needs both classes".into()));
    }
    Ok(TrainedModel::LogReg {
        params: *params,
        model: LogisticModel::fit(&x.rows, &x.labels, params),
    })
}

/// A single-class `x` gives a depth-0 tree predicting that class.
pub fn train_tree(x: &FeatureMatrix, params: &TreeParams) -> Result<TrainedModel> {
    check_trainable(x)?;
    Ok(TrainedModel::Tree {
        params: *params,
        tree: DecisionTree::fit(&x.rows, &x.labels, params),
    })
}

pub fn train_forest(x: &FeatureMatrix, params: &ForestParams) -> Result<TrainedModel> {
    check_trainable(x)?;
    if params.n_trees == 0 {
        return Err(Error::Invalid("a forest needs at least one tree".into()));
    }
    Ok(TrainedModel::Forest {
        params: *params,
        forest: RandomForest::fit(&x.rows, &x.labels, params),
    })
}

/// Trains `kind` with `seed` written into its hyperparameters.
pub fn train(kind: BaselineKind, x: &FeatureMatrix, hyper: &BaselineHyper, seed: u64) -> Result<TrainedModel> {
    match kind {
        BaselineKind::Tree => train_tree(x, &TreeParams { seed, ..hyper.tree }),
        BaselineKind::LogReg => train_logreg(x, &LogRegParams { seed, ..hyper.logreg }),
        BaselineKind::Forest => train_forest(x, &ForestParams { seed, ..hyper.forest }),
    }
}

/// Draws `n / 2` rows of each class from the pool and trains on them alone.
/// Returns the model and the selected row indices.
pub fn few_shot_fit(
    kind: BaselineKind,
    pool: &FeatureMatrix,
    n: usize,
    hyper: &BaselineHyper,
    seed: u64,
) -> Result<(TrainedModel, Vec<usize>)> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Invalid(format!("few-shot size must be even and positive, got {n}")));
    }
    let per_class = n / 2;
    let mut rng = stream_rng(seed, "few-shot");
    let mut chosen = Vec::with_capacity(n);
    for class in [Label::Positive, Label::Negative] {
        let members: Vec<usize> = (0..pool.n_rows()).filter(|&i| pool.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::InsufficientClass {
                class,
                needed: per_class,
                available: members.len(),
            });
        }
        chosen.extend(
            rand::seq::index::sample(&mut rng, members.len(), per_class)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    let model = train(kind, &pool.subset(&chosen), hyper, seed)?;
    Ok((model, chosen))
}

/// Serialized baseline: the model plus the feature columns it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub mode: String,
    pub seed: u64,
    pub columns: Vec<MedicalCode>,
    pub model: TrainedModel,
}
