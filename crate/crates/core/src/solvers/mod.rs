//! Linear predictors: hinge-loss binary classifiers, the pairwise ranking
//! objective over same-batch pairs, whitening, and validation-based choice
//! of the regularisation weight.

mod io;
mod pairs;
mod select;
mod svm;
mod whiten;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT};
pub use pairs::{build_pairs, RankPair};
pub use select::{select_lambda, LabeledSet, LambdaSelection};
pub use svm::{hinge_objective, train_binary_svm, train_ranking_svm};
pub use whiten::{Whitener, DEFAULT_STD_FLOOR};

use crate::datamodel::FeatureMatrix;
use crate::error::{Error, Result};

/// Ratings strictly above this make an image a positive for binary models.
pub const BINARY_THRESHOLD: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[serde(alias = "bin")]
    Binary,
    #[serde(alias = "rank")]
    Ranking,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin" | "binary" => Ok(Objective::Binary),
            "rank" | "ranking" => Ok(Objective::Ranking),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Binary => "binary",
            Objective::Ranking => "ranking",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub lambda: f64,
    /// Upper bound on passes over the data.
    pub epochs: usize,
    pub seed: u64,
    /// Early stop once the relative objective decrease over `patience`
    /// epochs falls below this.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lambda: 1e-2,
            epochs: 200,
            seed: 0,
            tolerance: 1e-8,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    /// Always 0 for ranking models.
    pub b: f64,
    pub lambda: f64,
    pub objective: Objective,
    pub seed: u64,
    /// Epochs actually run.
    pub epochs: usize,
    /// Objective of the incumbent after each epoch.
    pub training_log: Vec<f64>,
    /// Names of the input columns, when they have names (e.g. indicators).
    #[serde(default)]
    pub columns: Vec<String>,
    /// Whitening applied to raw inputs before `w`, if any.
    #[serde(default)]
    pub whitener: Option<Whitener>,
}

impl LinearModel {
    pub fn zeros(dim: usize, objective: Objective) -> Self {
        LinearModel {
            w: vec![0.0; dim],
            b: 0.0,
            lambda: 0.0,
            objective,
            seed: 0,
            epochs: 0,
            training_log: Vec::new(),
            columns: Vec::new(),
            whitener: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Score of one raw row, whitening first when the model carries a whitener.
    pub fn score(&self, x: &[f64]) -> f64 {
        match &self.whitener {
            Some(wh) => svm::dot(&self.w, &wh.apply(x)) + self.b,
            None => svm::dot(&self.w, x) + self.b,
        }
    }
}

/// `w.x + b` for every row of `features`.
pub fn predict(model: &LinearModel, features: &FeatureMatrix) -> Result<BTreeMap<String, f64>> {
    if features.dim != model.dim() {
        return Err(Error::invalid(format!(
            "model expects {} features, matrix {} has {}",
            model.dim(),
            features.feature_name,
            features.dim
        )));
    }
    Ok(features
        .rows
        .iter()
        .map(|(id, x)| (id.clone(), model.score(x)))
        .collect())
}
