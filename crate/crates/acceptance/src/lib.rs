//! Reference implementations used by the acceptance suite. They are written
//! for clarity, not speed, and share no code with `iconika-core`.

/// Rank of each value: the number of strictly smaller values plus the
/// average position among its equals.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    brute_pearson(&brute_ranks(a), &brute_ranks(b))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Two-sided exact p-value: the share of reorderings of `b` whose |rho|
/// reaches the observed |rho| (within 1e-12).
pub fn brute_exact_p(a: &[f64], b: &[f64]) -> Option<f64> {
    let observed = brute_spearman(a, b)?.abs();
    let perms = permutations(a.len());
    let hits = perms
        .iter()
        .filter(|p| {
            let shuffled: Vec<f64> = p.iter().map(|&i| b[i]).collect();
            brute_spearman(a, &shuffled).unwrap_or(0.0).abs() >= observed - 1e-12
        })
        .count();
    Some(hits as f64 / perms.len() as f64)
}

/// Average precision by walking the ranked list; equal scores keep input order.
pub fn precision_walk_ap(scores: &[f64], ratings: &[f64], alpha: f64) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let positives = ratings.iter().filter(|r| **r > alpha).count();
    if positives == 0 {
        return None;
    }
    let mut precisions = Vec::new();
    for k in 1..=idx.len() {
        if ratings[idx[k - 1]] > alpha {
            let hits = idx[..k].iter().filter(|&&i| ratings[i] > alpha).count();
            precisions.push(hits as f64 / k as f64);
        }
    }
    Some(precisions.iter().sum::<f64>() / positives as f64)
}

/// Minimum of `f` over a regular grid on [-3,3]^2 with `steps` cells per axis.
pub fn grid_min(steps: usize, f: impl Fn([f64; 2]) -> f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let w = [
                -3.0 + 6.0 * i as f64 / steps as f64,
                -3.0 + 6.0 * j as f64 / steps as f64,
            ];
            best = best.min(f(w));
        }
    }
    best
}

/// Mean hinge loss of a 2-d linear classifier, minimised over the bias by
/// trying every point where some example sits exactly on its margin.
pub fn binary_objective_best_bias(w: [f64; 2], rows: &[[f64; 2]], y: &[f64], lambda: f64) -> f64 {
    let loss = |b: f64| {
        rows.iter()
            .zip(y)
            .map(|(x, yi)| (1.0 - yi * (w[0] * x[0] + w[1] * x[1] + b)).max(0.0))
            .sum::<f64>()
            / rows.len() as f64
    };
    let best = rows
        .iter()
        .zip(y)
        .map(|(x, yi)| loss(yi - (w[0] * x[0] + w[1] * x[1])))
        .fold(f64::INFINITY, f64::min);
    best + lambda / 2.0 * (w[0] * w[0] + w[1] * w[1])
}

/// Mean pairwise hinge loss over difference vectors, plus the regulariser.
pub fn ranking_objective(w: [f64; 2], diffs: &[[f64; 2]], lambda: f64) -> f64 {
    diffs
        .iter()
        .map(|d| (1.0 - (w[0] * d[0] + w[1] * d[1])).max(0.0))
        .sum::<f64>()
        / diffs.len() as f64
        + lambda / 2.0 * (w[0] * w[0] + w[1] * w[1])
}
