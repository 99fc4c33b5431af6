//! Stochastic subgradient training of L2-regularised hinge-loss models.
//!
//! Both trainers minimise
//!
//! ```text
//! (1/N) sum_i max{0, 1 - y_i (w.x_i + b)} + (lambda/2) |w|^2
//! ```
//!
//! with step `1/(lambda t)` over seeded per-epoch shuffles. Iterates are
//! averaged over a suffix window that restarts at every power-of-two epoch,
//! so the average always spans at least the latest half of the run. After
//! each epoch the averaged iterate (with its exactly minimising bias, for
//! binary models) becomes the incumbent if it does not raise the objective;
//! the incumbent is what `training_log` tracks and what is returned.
//! Training stops early once the averaged iterate's objective moves by less
//! than `tolerance` (relative) over `patience` epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinearModel, Objective, RankPair, TrainParams};
use crate::datamodel::FeatureMatrix;
use crate::error::{Error, Result};

/// Small training sets are cycled (reshuffling each pass) so that an epoch
/// always makes at least this many updates.
pub const MIN_EPOCH_STEPS: usize = 256;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Regularised mean hinge loss of `(w, b)` on `rows` with labels in {-1, +1}.
pub fn hinge_objective(w: &[f64], b: f64, rows: &[Vec<f64>], labels: &[f64], lambda: f64) -> f64 {
    let loss: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    loss / rows.len() as f64 + 0.5 * lambda * dot(w, w)
}

/// Bias minimising the mean hinge loss for fixed scores.
///
/// The loss is piecewise linear in `b` with one breakpoint `y_i - s_i` per
/// example, and its slope rises by one at each breakpoint starting from
/// `-#positives`. The flat minimum lies between the `P`-th and `P+1`-th
/// smallest breakpoints; the midpoint is returned.
pub(crate) fn optimal_bias(scores: &[f64], labels: &[f64]) -> f64 {
    let positives = labels.iter().filter(|&&y| y > 0.0).count();
    let mut bp: Vec<f64> = scores.iter().zip(labels).map(|(s, y)| y - s).collect();
    bp.sort_by(f64::total_cmp);
    match positives {
        0 => bp[0],
        p if p == bp.len() => bp[p - 1],
        p => 0.5 * (bp[p - 1] + bp[p]),
    }
}

struct Fit {
    w: Vec<f64>,
    b: f64,
    log: Vec<f64>,
    epochs: usize,
}

fn fit(rows: &[Vec<f64>], labels: &[f64], fit_bias: bool, params: &TrainParams) -> Fit {
    let dim = rows[0].len();
    let lambda = params.lambda;
    let objective = |w: &[f64], b: f64| hinge_objective(w, b, rows, labels, lambda);
    let bias_for = |w: &[f64]| {
        if fit_bias {
            let scores: Vec<f64> = rows.iter().map(|x| dot(w, x)).collect();
            optimal_bias(&scores, labels)
        } else {
            0.0
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut w = vec![0.0; dim];
    let mut b = bias_for(&w);
    let mut avg = vec![0.0; dim];
    let mut avg_count = 0usize;
    let mut best_w = w.clone();
    let mut best_b = b;
    let mut best_obj = objective(&best_w, best_b);
    let mut log = Vec::with_capacity(params.epochs);
    let mut cand_history = Vec::with_capacity(params.epochs);
    let radius2 = 2.0 / lambda;
    let epoch_len = rows.len().max(MIN_EPOCH_STEPS);
    let mut t = 0u64;

    for epoch in 1..=params.epochs {
        if epoch.is_power_of_two() {
            avg.iter_mut().for_each(|a| *a = 0.0);
            avg_count = 0;
        }
        let mut steps = 0;
        while steps < epoch_len {
            order.shuffle(&mut rng);
            for &i in order.iter().take(epoch_len - steps) {
                steps += 1;
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let (x, y) = (&rows[i], labels[i]);
                let margin = y * (dot(&w, x) + b);
                let shrink = 1.0 - eta * lambda;
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (v, xi) in w.iter_mut().zip(x) {
                        *v += eta * y * xi;
                    }
                    if fit_bias {
                        b += eta * y;
                    }
                }
                // the optimum satisfies |w|^2 <= 2/lambda
                let norm2 = dot(&w, &w);
                if norm2 > radius2 {
                    let s = (radius2 / norm2).sqrt();
                    w.iter_mut().for_each(|v| *v *= s);
                }
                avg_count += 1;
                let inv = 1.0 / avg_count as f64;
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += (v - *a) * inv;
                }
            }
        }
        let cand_b = bias_for(&avg);
        if fit_bias {
            b = bias_for(&w);
        }
        let cand_obj = objective(&avg, cand_b);
        if cand_obj <= best_obj {
            best_obj = cand_obj;
            best_w.copy_from_slice(&avg);
            best_b = cand_b;
        }
        log.push(best_obj);
        cand_history.push(cand_obj);

        let n = cand_history.len();
        if n > params.patience {
            let before = cand_history[n - 1 - params.patience];
            let rel = (before - cand_obj).abs() / cand_obj.abs().max(f64::MIN_POSITIVE);
            if rel < params.tolerance {
                break;
            }
        }
    }

    // weights are persisted at single precision
    let w = best_w.iter().map(|v| *v as f32 as f64).collect();
    Fit {
        w,
        b: best_b,
        epochs: log.len(),
        log,
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no training rows"))?;
    if dim == 0 {
        return Err(Error::invalid("zero-dimensional training rows"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::invalid(format!(
                "row {i} has {} values, expected {dim}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row {i} has non-finite values")));
        }
    }
    Ok(dim)
}

fn check_params(params: &TrainParams) -> Result<()> {
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {}",
            params.lambda
        )));
    }
    if params.epochs == 0 {
        return Err(Error::invalid("epochs must be positive"));
    }
    Ok(())
}

/// Binary hinge-loss classifier with an unregularised bias.
pub fn train_binary_svm(
    rows: &[Vec<f64>],
    labels: &[bool],
    params: &TrainParams,
) -> Result<LinearModel> {
    check_params(params)?;
    check_rows(rows)?;
    if rows.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate(
            "binary training needs both positive and negative examples".into(),
        ));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let f = fit(rows, &y, true, params);
    Ok(LinearModel {
        w: f.w,
        b: f.b,
        lambda: params.lambda,
        objective: Objective::Binary,
        seed: params.seed,
        epochs: f.epochs,
        training_log: f.log,
        columns: Vec::new(),
        whitener: None,
    })
}

/// Pairwise ranking model: hinge loss on `w.(x+ - x-)`, no bias.
pub fn train_ranking_svm(
    features: &FeatureMatrix,
    pairs: &[RankPair],
    params: &TrainParams,
) -> Result<LinearModel> {
    check_params(params)?;
    if pairs.is_empty() {
        return Err(Error::invalid("ranking training needs at least one pair"));
    }
    let row = |id: &str| {
        features
            .get(id)
            .ok_or_else(|| Error::MissingFeatures(id.to_string()))
    };
    let diffs = pairs
        .iter()
        .map(|p| {
            let (a, b) = (row(&p.pos_id)?, row(&p.neg_id)?);
            Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let labels = ranking_labels(diffs.len());
    Ok(train_on_differences(&diffs, &labels, params))
}

pub(crate) fn ranking_labels(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

pub(crate) fn train_on_differences(
    diffs: &[Vec<f64>],
    labels: &[f64],
    params: &TrainParams,
) -> LinearModel {
    let f = fit(diffs, labels, false, params);
    LinearModel {
        w: f.w,
        b: 0.0,
        lambda: params.lambda,
        objective: Objective::Ranking,
        seed: params.seed,
        epochs: f.epochs,
        training_log: f.log,
        columns: Vec::new(),
        whitener: None,
    }
}
