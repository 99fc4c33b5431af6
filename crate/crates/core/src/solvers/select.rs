use std::collections::BTreeMap;

use log::warn;

use super::{
    build_pairs, predict, train_binary_svm, train_ranking_svm, LinearModel, Objective, TrainParams,
    BINARY_THRESHOLD,
};
use crate::datamodel::{AnnotationBatch, FeatureMatrix, RatingRecord};
use crate::error::{Error, Result};
use crate::rankstats::{average_precision, spearman};

/// Features plus the supervision needed by either objective.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSet<'a> {
    pub features: &'a FeatureMatrix,
    pub ratings: &'a [RatingRecord],
    pub batches: &'a [AnnotationBatch],
}

impl LabeledSet<'_> {
    /// Mean rating of every image that has both ratings and a feature row.
    pub fn targets(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in self.ratings {
            if self.features.get(&r.image_id).is_some() {
                let e = acc.entry(&r.image_id).or_default();
                e.0 += r.rating as f64;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(id, (s, n))| (id.to_string(), s / n as f64))
            .collect()
    }

    pub fn train(&self, objective: Objective, params: &TrainParams) -> Result<LinearModel> {
        match objective {
            Objective::Binary => {
                let targets = self.targets();
                let rows: Vec<Vec<f64>> = targets
                    .keys()
                    .map(|id| self.features.get(id).expect("filtered").to_vec())
                    .collect();
                let labels: Vec<bool> = targets.values().map(|r| *r > BINARY_THRESHOLD).collect();
                train_binary_svm(&rows, &labels, params)
            }
            Objective::Ranking => {
                let pairs = build_pairs(self.ratings, self.batches);
                train_ranking_svm(self.features, &pairs, params)
            }
        }
    }

    /// Validation metric of `model` on this set: SRC for ranking models,
    /// AP for binary ones. `None` when the metric is undefined.
    pub fn validate(&self, model: &LinearModel) -> Result<Option<f64>> {
        let targets = self.targets();
        if targets.len() < 2 {
            return Ok(None);
        }
        let scores = predict(model, self.features)?;
        let s: Vec<f64> = targets.keys().map(|id| scores[id]).collect();
        let r: Vec<f64> = targets.values().copied().collect();
        match model.objective {
            Objective::Ranking => {
                if r.windows(2).all(|w| w[0] == w[1]) {
                    return Ok(None);
                }
                Ok(Some(spearman(&s, &r)?.rho))
            }
            Objective::Binary => match average_precision(&s, &r, BINARY_THRESHOLD) {
                Ok(ap) => Ok(Some(ap)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Validation metric per grid value (ascending lambda); `None` where
    /// training or validation was degenerate.
    pub scores: Vec<(f64, Option<f64>)>,
    pub fell_back: bool,
    pub warnings: Vec<String>,
}

fn grid_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Trains on `first` for each grid value and keeps the lambda with the best
/// validation metric on `second`. Ties go to the smaller lambda. If no grid
/// value yields a defined metric, the (lower) grid median is returned.
pub fn select_lambda(
    first: &LabeledSet,
    second: &LabeledSet,
    grid: &[f64],
    objective: Objective,
    base: &TrainParams,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut warnings = Vec::new();
    if sorted.len() == 1 {
        return Ok(LambdaSelection {
            lambda: sorted[0],
            scores: vec![(sorted[0], None)],
            fell_back: false,
            warnings,
        });
    }

    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        let params = TrainParams { lambda, ..*base };
        let metric = match first.train(objective, &params) {
            Ok(model) => second.validate(&model)?,
            Err(Error::Degenerate(_)) | Err(Error::InvalidInput(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(m) = metric {
            if best.is_none_or(|(_, b)| m > b + 1e-12) {
                best = Some((lambda, m));
            }
        }
        scores.push((lambda, metric));
    }
    let (lambda, fell_back) = match best {
        Some((l, _)) => (l, false),
        None => {
            let l = grid_median(&sorted);
            let msg = format!("lambda selection degenerate; falling back to grid median {l}");
            warn!("{msg}");
            warnings.push(msg);
            (l, true)
        }
    };
    Ok(LambdaSelection {
        lambda,
        scores,
        fell_back,
        warnings,
    })
}
