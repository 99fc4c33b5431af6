//! Tie-aware rank statistics: fractional ranks, Spearman's rank correlation
//! with significance, and average precision over graded ratings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Graded ratings strictly above this count as positives for AP.
pub const DEFAULT_ALPHA: f64 = 1.5;

/// Largest `n` for which the exact permutation test is offered.
pub const MAX_EXACT_N: usize = 8;

// Tolerance used when comparing permuted correlations against the observed one.
const RHO_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    TApproximation,
    ExactPermutation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degeneracy {
    /// One of the inputs was constant; rho is reported as 0.
    ConstantInput,
    /// Fewer than four samples under the t-approximation; p is reported as 1.
    TooFewSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
    pub degeneracy: Option<Degeneracy>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PValue {
    pub p: f64,
    pub degeneracy: Option<Degeneracy>,
}

/// Ranks `1..=n` by ascending score, ties sharing the mean of their positions.
pub fn fractional_ranks(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot rank an empty vector"));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite score at index {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    Ok(ranks)
}

/// Pearson correlation of two equally long vectors; `None` when either has
/// zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 samples"));
    }
    Ok(())
}

/// Spearman's rho with the default t-approximation p-value.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<CorrelationResult> {
    spearman_with(a, b, PValueMethod::TApproximation)
}

/// Spearman's rho: Pearson correlation of the fractional ranks.
///
/// With `ExactPermutation` (n up to [`MAX_EXACT_N`]) the p-value comes from
/// enumerating every reordering of `b`'s ranks, so ties are honoured.
pub fn spearman_with(a: &[f64], b: &[f64], method: PValueMethod) -> Result<CorrelationResult> {
    check_pair(a, b)?;
    let ra = fractional_ranks(a)?;
    let rb = fractional_ranks(b)?;
    let n = a.len();
    let Some(rho) = pearson(&ra, &rb) else {
        return Ok(CorrelationResult {
            rho: 0.0,
            p_value: 1.0,
            n,
            method,
            degeneracy: Some(Degeneracy::ConstantInput),
        });
    };
    let p = match method {
        PValueMethod::TApproximation => t_approx_pvalue(rho, n),
        PValueMethod::ExactPermutation => PValue {
            p: exact_permutation_pvalue_ranked(&ra, &rb, rho)?,
            degeneracy: None,
        },
    };
    Ok(CorrelationResult {
        rho,
        p_value: p.p,
        n,
        method,
        degeneracy: p.degeneracy,
    })
}

/// Two-sided p-value for an observed rho over `n` samples.
///
/// The exact variant assumes untied rankings (ranks `1..=n` on both sides);
/// use [`spearman_with`] for exact tests on tied data.
pub fn spearman_pvalue(rho: f64, n: usize, method: PValueMethod) -> Result<PValue> {
    if rho.is_nan() || rho.abs() > 1.0 + 1e-12 {
        return Err(Error::invalid(format!("rho {rho} outside [-1, 1]")));
    }
    if n < 2 {
        return Err(Error::invalid("p-value needs n >= 2"));
    }
    match method {
        PValueMethod::TApproximation => Ok(t_approx_pvalue(rho, n)),
        PValueMethod::ExactPermutation => {
            let ranks: Vec<f64> = (1..=n).map(|r| r as f64).collect();
            Ok(PValue {
                p: exact_permutation_pvalue_ranked(&ranks, &ranks, rho)?,
                degeneracy: None,
            })
        }
    }
}

fn t_approx_pvalue(rho: f64, n: usize) -> PValue {
    if n < 4 {
        return PValue {
            p: 1.0,
            degeneracy: Some(Degeneracy::TooFewSamples),
        };
    }
    let r2 = rho * rho;
    if r2 >= 1.0 {
        return PValue {
            p: 0.0,
            degeneracy: None,
        };
    }
    let df = (n - 2) as f64;
    let t2 = r2 * df / (1.0 - r2);
    // Two-sided Student-t tail: P(|T| >= t) = I_{df/(df+t^2)}(df/2, 1/2).
    let p = beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0);
    PValue {
        p,
        degeneracy: None,
    }
}

/// Fraction of the `n!` orderings of `rb` whose |rho| against `ra` reaches
/// `|observed|`.
fn exact_permutation_pvalue_ranked(ra: &[f64], rb: &[f64], observed: f64) -> Result<f64> {
    let n = ra.len();
    if n > MAX_EXACT_N {
        return Err(Error::invalid(format!(
            "exact permutation test supports n <= {MAX_EXACT_N}, got {n}"
        )));
    }
    let target = observed.abs() - RHO_EPS;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut buf = vec![0.0; n];
    let (mut hits, mut total) = (0u64, 0u64);
    loop {
        for (slot, &i) in buf.iter_mut().zip(&perm) {
            *slot = rb[i];
        }
        let r = pearson(ra, &buf).unwrap_or(0.0);
        total += 1;
        if r.abs() >= target {
            hits += 1;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Average precision of the ranking induced by `scores`, with items whose
/// `ratings` exceed `alpha` as positives.
///
/// Items are ordered by descending score; equal scores keep the caller's
/// input order, so callers pass items sorted by their tie key (image id).
pub fn average_precision(scores: &[f64], ratings: &[f64], alpha: f64) -> Result<f64> {
    if scores.len() != ratings.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} scores vs {} ratings",
            scores.len(),
            ratings.len()
        )));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite score at index {i}")));
    }
    let positives = ratings.iter().filter(|&&r| r > alpha).count();
    if positives == 0 {
        return Err(Error::Degenerate(format!(
            "average precision undefined: no rating above {alpha}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if ratings[i] > alpha {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}
