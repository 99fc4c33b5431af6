//! Evaluation of indicators against ratings, indicator correlation, score
//! fusion, annotator agreement and per-image contribution breakdowns.

mod experiment;

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

pub use experiment::{
    agreement_tsv, correlation_tsv, rows_tsv, run_experiment, sha256_hex, split_suites, test_truth, DipConfig,
    ExperimentConfig, ExperimentReport, FusionConfig,
};

use crate::datamodel::{split_half, Dataset, FeatureMatrix, RatingRecord, Split};
use crate::error::{Error, Result};
use crate::indicators::{IndicatorScores, Provenance};
use crate::rankstats::{average_precision, spearman, DEFAULT_ALPHA};
use crate::solvers::{
    select_lambda, LabeledSet, LambdaSelection, LinearModel, Objective, TrainParams, Whitener,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub name: String,
    pub src: f64,
    pub p_value: f64,
    /// `None` when no evaluated image is a positive.
    pub ap: Option<f64>,
    pub n: usize,
    /// Set when SRC is undefined (constant scores or ratings).
    pub degenerate: bool,
}

/// SRC, its p-value and AP of `scores` against `truth` over their common
/// images. Ties in AP are broken by image id.
pub fn evaluate_indicator(
    scores: &IndicatorScores,
    truth: &BTreeMap<String, f64>,
) -> Result<EvaluationRow> {
    let (s, r): (Vec<f64>, Vec<f64>) = scores
        .scores
        .iter()
        .filter_map(|(id, v)| truth.get(id).map(|t| (*v, *t)))
        .unzip();
    if s.len() < 2 {
        return Err(Error::invalid(format!(
            "indicator {} shares {} images with the ratings; need at least 2",
            scores.indicator_name,
            s.len()
        )));
    }
    let c = spearman(&s, &r)?;
    let ap = match average_precision(&s, &r, DEFAULT_ALPHA) {
        Ok(ap) => Some(ap),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvaluationRow {
        name: scores.indicator_name.clone(),
        src: c.rho,
        p_value: c.p_value,
        ap,
        n: s.len(),
        degenerate: c.degeneracy == Some(crate::rankstats::Degeneracy::ConstantInput),
    })
}

/// Pairwise SRC between indicators; `None` marks pairs with fewer than two
/// common images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
}

pub fn indicator_correlation_matrix(suite: &[IndicatorScores]) -> Result<CorrelationMatrix> {
    let k = suite.len();
    let mut entries = vec![vec![None; k]; k];
    for i in 0..k {
        entries[i][i] = Some(1.0);
        for j in i + 1..k {
            let (a, b): (Vec<f64>, Vec<f64>) = suite[i]
                .scores
                .iter()
                .filter_map(|(id, v)| suite[j].scores.get(id).map(|w| (*v, *w)))
                .unzip();
            let v = if a.len() < 2 {
                warn!(
                    "indicators {} and {} share fewer than 2 images",
                    suite[i].indicator_name, suite[j].indicator_name
                );
                None
            } else {
                Some(spearman(&a, &b)?.rho)
            };
            entries[i][j] = v;
            entries[j][i] = v;
        }
    }
    Ok(CorrelationMatrix {
        names: suite.iter().map(|s| s.indicator_name.clone()).collect(),
        entries,
    })
}

/// Rows of the suite for images scored by every indicator, in id order,
/// and the ids that had to be left out.
pub fn suite_rows(suite: &[IndicatorScores]) -> (Vec<String>, Vec<Vec<f64>>, Vec<String>) {
    let all: BTreeSet<&String> = suite.iter().flat_map(|s| s.scores.keys()).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for id in all {
        let row: Option<Vec<f64>> = suite.iter().map(|s| s.scores.get(id).copied()).collect();
        match row {
            Some(r) => {
                ids.push(id.clone());
                rows.push(r);
            }
            None => excluded.push(id.clone()),
        }
    }
    (ids, rows, excluded)
}

/// Fits one whitener over the indicator columns, on images scored by all.
pub fn fit_suite_whitener(train_suite: &[IndicatorScores]) -> Result<Whitener> {
    if train_suite.is_empty() {
        return Err(Error::invalid("empty indicator suite"));
    }
    let (_, rows, _) = suite_rows(train_suite);
    Whitener::fit(&rows)
}

fn check_columns(suite: &[IndicatorScores], whitener: &Whitener) -> Result<()> {
    if suite.is_empty() {
        return Err(Error::invalid("empty indicator suite"));
    }
    if suite.len() != whitener.dim() {
        return Err(Error::invalid(format!(
            "{} indicators but the whitener has {} columns",
            suite.len(),
            whitener.dim()
        )));
    }
    Ok(())
}

/// Mean of the whitened indicator values per image. Images missing any
/// indicator are dropped with a warning.
pub fn fuse_average(suite: &[IndicatorScores], whitener: &Whitener) -> Result<IndicatorScores> {
    check_columns(suite, whitener)?;
    let (ids, rows, excluded) = suite_rows(suite);
    if !excluded.is_empty() {
        warn!("average fusion: {} images lack some indicator and are excluded", excluded.len());
    }
    let mut out = IndicatorScores::new("average", Provenance::Predicted);
    for (id, row) in ids.into_iter().zip(rows) {
        let z = whitener.apply(&row);
        out.scores.insert(id, z.iter().sum::<f64>() / z.len() as f64);
    }
    Ok(out)
}

/// Builds a feature matrix whose columns are the suite's indicators.
pub fn suite_matrix(suite: &[IndicatorScores], name: &str) -> Result<FeatureMatrix> {
    let (ids, rows, excluded) = suite_rows(suite);
    if !excluded.is_empty() {
        warn!("{name}: {} images lack some indicator and are excluded", excluded.len());
    }
    FeatureMatrix::from_rows(name, suite.len(), ids.into_iter().zip(rows))
}

/// A model selected on the two halves of the train split, then refit on all of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedModel {
    pub model: LinearModel,
    pub selection: LambdaSelection,
    pub warnings: Vec<String>,
}

/// Chooses lambda on class-stratified halves of `dataset`'s train split,
/// then trains on the full train split with it.
pub fn train_selected(
    dataset: &Dataset,
    features: &FeatureMatrix,
    objective: Objective,
    grid: &[f64],
    seed: u64,
    base: &TrainParams,
) -> Result<SelectedModel> {
    let train = dataset.split(Split::Train);
    let halves = split_half(&train, seed)?;
    let first = LabeledSet {
        features,
        ratings: &halves.first.ratings,
        batches: &halves.first.batches,
    };
    let second = LabeledSet {
        features,
        ratings: &halves.second.ratings,
        batches: &halves.second.batches,
    };
    let params = TrainParams { seed, ..*base };
    let selection = select_lambda(&first, &second, grid, objective, &params)?;
    let full = LabeledSet {
        features,
        ratings: &train.ratings,
        batches: &train.batches,
    };
    let model = full.train(
        objective,
        &TrainParams {
            lambda: selection.lambda,
            ..params
        },
    )?;
    let mut warnings = halves.warnings;
    warnings.extend(selection.warnings.iter().cloned());
    Ok(SelectedModel {
        model,
        selection,
        warnings,
    })
}

/// Learns a class-independent linear weighting of whitened indicators.
///
/// The whitener is fit on the train-split scores; the returned model carries
/// it and the indicator names, so it scores raw indicator rows directly.
pub fn fuse_learned(
    dataset: &Dataset,
    train_suite: &[IndicatorScores],
    objective: Objective,
    grid: &[f64],
    seed: u64,
    base: &TrainParams,
) -> Result<SelectedModel> {
    let whitener = fit_suite_whitener(train_suite)?;
    let raw = suite_matrix(train_suite, "fusion")?;
    let mut white = FeatureMatrix::new("fusion", raw.dim);
    for (id, row) in &raw.rows {
        white.insert(id.clone(), whitener.apply(row))?;
    }
    let mut selected = train_selected(dataset, &white, objective, grid, seed, base)?;
    selected.model.whitener = Some(whitener);
    selected.model.columns = train_suite.iter().map(|s| s.indicator_name.clone()).collect();
    Ok(selected)
}

/// Applies a fusion model (with its own column order) to a suite.
pub fn apply_fusion(
    model: &LinearModel,
    suite: &[IndicatorScores],
    name: &str,
) -> Result<IndicatorScores> {
    let ordered = order_like(model, suite)?;
    let (ids, rows, _) = suite_rows(&ordered);
    let mut out = IndicatorScores::new(name, Provenance::Predicted);
    for (id, row) in ids.into_iter().zip(rows) {
        out.scores.insert(id, model.score(&row));
    }
    Ok(out)
}

fn order_like(model: &LinearModel, suite: &[IndicatorScores]) -> Result<Vec<IndicatorScores>> {
    if model.columns.is_empty() {
        return Ok(suite.to_vec());
    }
    model
        .columns
        .iter()
        .map(|c| {
            suite
                .iter()
                .find(|s| &s.indicator_name == c)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("suite lacks indicator {c}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub annotator_a: String,
    pub annotator_b: String,
    pub n: usize,
    pub src: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAgreement {
    pub members: Vec<String>,
    /// Arithmetic mean of the defined pairwise SRCs.
    pub mean_src: Option<f64>,
    pub pairs: Vec<PairAgreement>,
}

/// SRC between every pair of annotators in a group, over the images both
/// rated. Pairs with fewer than two shared images or constant ratings are
/// reported without an SRC and left out of the group mean.
pub fn annotator_agreement(
    ratings: &[RatingRecord],
    groups: &[Vec<String>],
) -> Vec<GroupAgreement> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in ratings {
        by_annotator
            .entry(&r.annotator_id)
            .or_default()
            .insert(&r.image_id, r.rating as f64);
    }
    let empty = BTreeMap::new();
    groups
        .iter()
        .map(|members| {
            let mut pairs = Vec::new();
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    let ra = by_annotator.get(a.as_str()).unwrap_or(&empty);
                    let rb = by_annotator.get(b.as_str()).unwrap_or(&empty);
                    let (x, y): (Vec<f64>, Vec<f64>) = ra
                        .iter()
                        .filter_map(|(id, v)| rb.get(id).map(|w| (*v, *w)))
                        .unzip();
                    let c = (x.len() >= 2)
                        .then(|| spearman(&x, &y).expect("equal lengths"))
                        .filter(|c| c.degeneracy != Some(crate::rankstats::Degeneracy::ConstantInput));
                    pairs.push(PairAgreement {
                        annotator_a: a.clone(),
                        annotator_b: b.clone(),
                        n: x.len(),
                        src: c.as_ref().map(|c| c.rho),
                        p_value: c.as_ref().map(|c| c.p_value),
                    });
                }
            }
            let defined: Vec<f64> = pairs.iter().filter_map(|p| p.src).collect();
            let mean_src =
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            GroupAgreement {
                members: members.clone(),
                mean_src,
                pairs,
            }
        })
        .collect()
}

/// Groups annotators that are linked through at least two commonly rated
/// images; singletons are dropped.
pub fn overlap_groups(ratings: &[RatingRecord]) -> Vec<Vec<String>> {
    let mut images: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in ratings {
        images.entry(&r.annotator_id).or_default().insert(&r.image_id);
    }
    let names: Vec<&str> = images.keys().copied().collect();
    let mut parent: Vec<usize> = (0..names.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            if images[names[i]].intersection(&images[names[j]]).count() >= 2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(n.to_string());
    }
    groups.into_values().filter(|g| g.len() > 1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageContribution {
    pub image_id: String,
    pub score: f64,
    pub bias: f64,
    /// `w_i * z_i` per indicator.
    pub contributions: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub class_id: u32,
    pub best: ImageContribution,
    pub worst: ImageContribution,
}

fn contribution(model: &LinearModel, names: &[String], id: &str, row: &[f64]) -> ImageContribution {
    let z = match &model.whitener {
        Some(w) => w.apply(row),
        None => row.to_vec(),
    };
    ImageContribution {
        image_id: id.to_string(),
        score: model.score(row),
        bias: model.b,
        contributions: names
            .iter()
            .zip(model.w.iter().zip(&z))
            .map(|(n, (w, z))| (n.clone(), w * z))
            .collect(),
    }
}

/// Highest- and lowest-scoring images of a class under a fusion model, with
/// each indicator's share of the score. Ties go to the smaller image id.
pub fn contribution_report(
    model: &LinearModel,
    suite: &[IndicatorScores],
    dataset: &Dataset,
    class_id: u32,
) -> Result<ContributionReport> {
    let ordered = order_like(model, suite)?;
    let names: Vec<String> = ordered.iter().map(|s| s.indicator_name.clone()).collect();
    let (ids, rows, _) = suite_rows(&ordered);
    let mut best: Option<(f64, usize)> = None;
    let mut worst: Option<(f64, usize)> = None;
    for (i, id) in ids.iter().enumerate() {
        if dataset.records.get(id).map(|r| r.class_id) != Some(class_id) {
            continue;
        }
        let s = model.score(&rows[i]);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i));
        }
        if worst.is_none_or(|(w, _)| s < w) {
            worst = Some((s, i));
        }
    }
    let (Some((_, bi)), Some((_, wi))) = (best, worst) else {
        return Err(Error::invalid(format!("class {class_id} has no evaluated images")));
    };
    Ok(ContributionReport {
        class_id,
        best: contribution(model, &names, &ids[bi], &rows[bi]),
        worst: contribution(model, &names, &ids[wi], &rows[wi]),
    })
}
