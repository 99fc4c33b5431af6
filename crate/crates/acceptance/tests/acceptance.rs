//! Acceptance criteria, one line of output per criterion.
//!
//! Runs without the libtest harness so every verdict is printed even when
//! the run passes. The process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use iconika_acceptance::*;
use iconika_core::datamodel::{FeatureMatrix, Split};
use iconika_core::indicators::{
    bb_dist2center, bb_size, dap_score, i2c_att_score, BoxSource, ClassPrototype, IndicatorScores,
    Provenance,
};
use iconika_core::pipeline::{
    annotator_agreement, apply_fusion, evaluate_indicator, fit_suite_whitener, fuse_average,
    fuse_learned, run_experiment,
};
use iconika_core::rankstats::{average_precision, spearman, spearman_with, PValueMethod};
use iconika_core::solvers::{
    build_pairs, decode_model, encode_model, load_model, predict, save_model, train_binary_svm,
    train_ranking_svm, Objective, RankPair, TrainParams,
};
use iconika_core::{datamodel::ImageRecord, datamodel::BoundingBox, synthetic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut p_mismatch = 0usize;
    let mut exact_checked = 0usize;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=6);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let got = spearman(&a, &b).unwrap();
        match brute_spearman(&a, &b) {
            Some(rho) => worst = worst.max((got.rho - rho).abs()),
            None => {
                if got.degeneracy.is_none() {
                    return verdict(false, format!("constant input not flagged: {a:?} {b:?}"));
                }
                continue;
            }
        }
        if exact_checked < 2_000 {
            exact_checked += 1;
            let p = spearman_with(&a, &b, PValueMethod::ExactPermutation).unwrap().p_value;
            if Some(p) != brute_exact_p(&a, &b) {
                p_mismatch += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-12 && p_mismatch == 0 && elapsed < Duration::from_secs(30),
        format!(
            "max |rho - oracle| = {worst:.1e} over 10000 pairs; exact p mismatches {p_mismatch}/{exact_checked}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut iff_violations = 0usize;
    let mut done = 0usize;
    while done < 1_000 {
        let n = rng.random_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let ratings: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let Some(expected) = precision_walk_ap(&scores, &ratings, 1.5) else {
            continue;
        };
        done += 1;
        let got = average_precision(&scores, &ratings, 1.5).unwrap();
        worst = worst.max((got - expected).abs());
        // order after the tie-break: descending score, then input position
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        let pos: Vec<bool> = order.iter().map(|&i| ratings[i] > 1.5).collect();
        let separated = pos.windows(2).all(|w| w[0] || !w[1]);
        if separated != (got == 1.0) {
            iff_violations += 1;
        }
    }
    verdict(
        worst <= 1e-12 && iff_violations == 0,
        format!("max |AP - oracle| = {worst:.1e} over 1000 instances; AP=1 iff separated violations {iff_violations}"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::NEG_INFINITY;
    let mut best = f64::INFINITY;
    let mut log_violations = 0usize;
    let monotone = |log: &[f64]| log.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15);
    let cases = 20;
    for case in 0..cases {
        let lambda = [0.1, 0.3, 1.0][case % 3];
        let params = TrainParams {
            lambda,
            seed: case as u64,
            ..TrainParams::default()
        };
        let (rows, labels) = loop {
            let n = rng.random_range(2..=5);
            let rows: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                break (rows, labels);
            }
        };
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let vec_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let m = train_binary_svm(&vec_rows, &labels, &params).unwrap();
        let got = objective_with_bias(&m.w, m.b, &rows, &y, lambda);
        let grid = grid_min(600, |w| binary_objective_best_bias(w, &rows, &y, lambda));
        worst = worst.max(got / grid - 1.0);
        best = best.min(got / grid - 1.0);
        log_violations += usize::from(!monotone(&m.training_log));

        let n = rng.random_range(2..=5);
        let mut f = FeatureMatrix::new("x", 2);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        for (i, p) in pts.iter().enumerate() {
            f.insert(format!("p{i}"), p.to_vec()).unwrap();
        }
        let mut pairs = Vec::new();
        let mut diffs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(0.3) {
                    pairs.push(RankPair {
                        pos_id: format!("p{i}"),
                        neg_id: format!("p{j}"),
                        annotator_id: "a".into(),
                        batch_id: "b".into(),
                    });
                    diffs.push([pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]]);
                }
            }
        }
        if pairs.is_empty() {
            pairs.push(RankPair {
                pos_id: "p0".into(),
                neg_id: "p1".into(),
                annotator_id: "a".into(),
                batch_id: "b".into(),
            });
            diffs.push([pts[0][0] - pts[1][0], pts[0][1] - pts[1][1]]);
        }
        let m = train_ranking_svm(&f, &pairs, &params).unwrap();
        let got = ranking_objective([m.w[0], m.w[1]], &diffs, lambda);
        let grid = grid_min(600, |w| ranking_objective(w, &diffs, lambda));
        worst = worst.max(got / grid - 1.0);
        best = best.min(got / grid - 1.0);
        log_violations += usize::from(!monotone(&m.training_log));
    }
    verdict(
        worst <= 0.02 && log_violations == 0,
        format!(
            "{} instances; trained/grid objective - 1 ranges {:+.3}% to {:+.3}%; non-monotone logs {log_violations}",
            2 * cases,
            100.0 * best,
            100.0 * worst
        ),
    )
}

fn objective_with_bias(w: &[f64], b: f64, rows: &[[f64; 2]], y: &[f64], lambda: f64) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(x, yi)| (1.0 - yi * (w[0] * x[0] + w[1] * x[1] + b)).max(0.0))
        .sum::<f64>()
        / rows.len() as f64
        + lambda / 2.0 * (w[0] * w[0] + w[1] * w[1])
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut good = 0;
    let mut details = Vec::new();
    for seed in 0..10 {
        let p = synthetic::planted_ranking(seed, &synthetic::PlantedRankingParams::default());
        let pairs = build_pairs(&p.train_ratings, &p.train_batches);
        let params = TrainParams {
            lambda: 1e-3,
            seed,
            ..TrainParams::default()
        };
        let model = train_ranking_svm(&p.features, &pairs, &params).unwrap();
        let scores = predict(&model, &p.features).unwrap();
        let (mut right, mut total) = (0usize, 0usize);
        for b in &p.test_batches {
            for i in &b.image_ids {
                for j in &b.image_ids {
                    if p.planted[i] > p.planted[j] {
                        total += 1;
                        right += usize::from(scores[i] > scores[j]);
                    }
                }
            }
        }
        let acc = right as f64 / total as f64;
        let test_ids: Vec<&String> = p.test_batches.iter().flat_map(|b| &b.image_ids).collect();
        let s: Vec<f64> = test_ids.iter().map(|id| scores[*id]).collect();
        let t: Vec<f64> = test_ids.iter().map(|id| p.planted[*id]).collect();
        let src = spearman(&s, &t).unwrap().rho;
        if acc >= 0.95 && src >= 0.85 {
            good += 1;
        }
        details.push(format!("{acc:.3}/{src:.3}"));
    }
    let elapsed = start.elapsed();
    verdict(
        good >= 9 && elapsed < Duration::from_secs(60),
        format!(
            "{good}/10 seeds reach pairwise acc >= 0.95 and SRC >= 0.85 (acc/SRC: {}); {:.1}s",
            details.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn fusion_suite(d: &iconika_core::datamodel::Dataset, split: Split) -> Vec<IndicatorScores> {
    synthetic::FUSION_INDICATORS
        .iter()
        .map(|name| {
            let mut s = IndicatorScores::new(*name, Provenance::External);
            for id in d.ids_in(split) {
                s.scores.insert(id.clone(), d.records[&id].external_scores[*name]);
            }
            s
        })
        .collect()
}

fn criterion_5() -> Verdict {
    let mut good = 0;
    let mut details = Vec::new();
    for seed in 0..10 {
        let (d, _) = synthetic::planted_fusion(seed, &synthetic::FusionParams::default());
        let truth_all = d.mean_ratings();
        let truth: BTreeMap<String, f64> = d
            .ids_in(Split::Test)
            .into_iter()
            .map(|id| (id.clone(), truth_all[&id]))
            .collect();
        let train = fusion_suite(&d, Split::Train);
        let test = fusion_suite(&d, Split::Test);
        let best_single = test
            .iter()
            .map(|s| evaluate_indicator(s, &truth).unwrap().src)
            .fold(f64::NEG_INFINITY, f64::max);
        let w = fit_suite_whitener(&train).unwrap();
        let avg = evaluate_indicator(&fuse_average(&test, &w).unwrap(), &truth).unwrap().src;
        let model = fuse_learned(&d, &train, Objective::Ranking, &[1e-3, 1e-2, 1e-1], seed, &TrainParams::default())
            .unwrap()
            .model;
        let learned = evaluate_indicator(&apply_fusion(&model, &test, "learned").unwrap(), &truth)
            .unwrap()
            .src;
        if learned > best_single && avg > best_single && learned >= avg - 0.02 {
            good += 1;
        }
        details.push(format!("{best_single:.3}/{avg:.3}/{learned:.3}"));
    }
    verdict(
        good >= 8,
        format!("{good}/10 seeds with fusion dominance (best single/average/learned: {})", details.join(" ")),
    )
}

fn criterion_6() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut r = ImageRecord::new("i", 1, 100, 100);
    r.gt_box = Some(BoundingBox { x: 10.0, y: 20.0, w: 50.0, h: 50.0 });
    check("bb_size 0.25", bb_size(&r, BoxSource::Gt).unwrap() == 0.25);
    r.gt_box = Some(BoundingBox { x: 0.0, y: 0.0, w: 100.0, h: 100.0 });
    check("bb_size 1.0", bb_size(&r, BoxSource::Gt).unwrap() == 1.0);
    r.gt_box = Some(BoundingBox { x: 25.0, y: 25.0, w: 50.0, h: 50.0 });
    check("dist2center 0", bb_dist2center(&r, BoxSource::Gt).unwrap() == 0.0);
    r.gt_box = Some(BoundingBox { x: -5.0, y: -5.0, w: 10.0, h: 10.0 });
    check(
        "dist2center corner -0.5",
        (bb_dist2center(&r, BoxSource::Gt).unwrap() + 0.5).abs() < 1e-12,
    );
    let proto = |attr_mean: Vec<f64>| ClassPrototype {
        class_id: 1,
        mu: vec![],
        attr_signature: Some(attr_mean.iter().map(|&v| v >= 0.5).collect()),
        attr_mean: Some(attr_mean),
    };
    check(
        "i2c -sqrt(2)",
        (i2c_att_score(&[true, true], &proto(vec![0.0, 0.0])).unwrap() + 2f64.sqrt()).abs() < 1e-15,
    );
    check("i2c 0", i2c_att_score(&[true, false], &proto(vec![1.0, 0.0])).unwrap() == 0.0);
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..2_000 {
        let m = rng.random_range(1..=10);
        let probs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let sig: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let p = ClassPrototype {
            class_id: 1,
            mu: vec![],
            attr_mean: None,
            attr_signature: Some(sig.clone()),
        };
        let product: f64 = probs
            .iter()
            .zip(&sig)
            .map(|(q, s)| (if *s { *q } else { 1.0 - q }).clamp(eps, 1.0 - eps))
            .product();
        let got = dap_score(&probs, &p, eps).unwrap().exp();
        worst = worst.max((got - product).abs());
    }
    check("dap log-product identity", worst <= 1e-12);
    let n = failures.len();
    verdict(
        n == 0,
        if n == 0 {
            format!("all indicator examples hold; DAP identity max error {worst:.1e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn criterion_7() -> Verdict {
    let eps: f64 = 1e-5;
    let step = ((1.0 - eps) / eps).ln();
    let mut worst_step = 0.0f64;
    let mut max_violations = 0usize;
    for m in 1..=10usize {
        for mask in 0..(1u32 << m) {
            let sig: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            let p = ClassPrototype {
                class_id: 1,
                mu: vec![],
                attr_mean: None,
                attr_signature: Some(sig.clone()),
            };
            let as_probs = |a: &[bool]| a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
            let best = dap_score(&as_probs(&sig), &p, eps).unwrap();
            for k in 0..m {
                let mut flipped = sig.clone();
                flipped[k] = !flipped[k];
                let s = dap_score(&as_probs(&flipped), &p, eps).unwrap();
                worst_step = worst_step.max(((best - s) - step).abs());
                if s >= best {
                    max_violations += 1;
                }
            }
            if m <= 6 {
                for other in 0..(1u32 << m) {
                    if other != mask {
                        let a: Vec<bool> = (0..m).map(|i| other >> i & 1 == 1).collect();
                        if dap_score(&as_probs(&a), &p, eps).unwrap() >= best {
                            max_violations += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        max_violations == 0 && worst_step <= 1e-9,
        format!(
            "signature-matching image is the strict maximum ({max_violations} violations); single flip costs log((1-e)/e) within {worst_step:.1e}"
        ),
    )
}

fn criterion_8() -> Verdict {
    // One campaign of 10 annotators x 50 images deviates from its expectation
    // with a standard deviation near 0.03, so besides the canonical seed the
    // tolerance is also checked as a rate over 20 independent campaigns.
    let params = synthetic::AgreementParams::default();
    let seeds = 20u64;
    let mut deviations = Vec::new();
    let mut canonical = Vec::new();
    for seed in 0..seeds {
        let campaign = synthetic::simulate_agreement(seed, &params);
        let groups = annotator_agreement(&campaign.ratings, &campaign.groups);
        let expected = synthetic::expected_group_agreement(seed, &params, 200);
        for (g, e) in groups.iter().zip(&expected) {
            let observed = g.mean_src.unwrap();
            deviations.push(observed - e);
            if seed == 0 {
                canonical.push(format!("{observed:.3} vs {e:.3}"));
            }
        }
    }
    let canonical_ok = deviations[..2].iter().all(|d| d.abs() <= 0.05);
    let within = deviations.iter().filter(|d| d.abs() <= 0.05).count();
    let bias = deviations.iter().sum::<f64>() / deviations.len() as f64;
    let low = synthetic::AgreementParams {
        noise: 0.2,
        ..params.clone()
    };
    let campaign = synthetic::simulate_agreement(100, &low);
    let groups = annotator_agreement(&campaign.ratings, &campaign.groups);
    let max_p = groups
        .iter()
        .flat_map(|g| g.pairs.iter().map(|p| p.p_value.unwrap_or(1.0)))
        .fold(0.0, f64::max);
    verdict(
        canonical_ok && within * 5 >= deviations.len() * 4 && bias.abs() <= 0.02 && max_p < 0.05,
        format!(
            "seed 0 group means {}; {within}/{} groups over {seeds} seeds within 0.05, mean deviation {bias:+.3}; low-noise max pair p = {max_p:.1e}",
            canonical.join(", "),
            deviations.len()
        ),
    )
}

fn criterion_9() -> Verdict {
    let d = synthetic::tiny_dataset();
    let cfg = synthetic::fixture_config(true);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&d, &cfg, a.path()).unwrap();
    let rb = run_experiment(&d, &cfg, b.path()).unwrap();
    let mut differing = Vec::new();
    let names: BTreeSet<_> = ra.files.iter().chain(&rb.files).collect();
    for f in &names {
        let x = std::fs::read(a.path().join(f)).ok();
        let y = std::fs::read(b.path().join(f)).ok();
        if x.is_none() || x != y {
            differing.push(f.display().to_string());
        }
    }
    let model_path = a.path().join("models/learned.model");
    let model = load_model(&model_path).unwrap();
    let copy = a.path().join("copy.model");
    save_model(&model, &copy).unwrap();
    let bytes_equal = std::fs::read(&model_path).unwrap() == std::fs::read(&copy).unwrap();
    let reloaded = decode_model(&encode_model(&model), "memory").unwrap();
    let bits_equal = reloaded
        .w
        .iter()
        .zip(&model.w)
        .all(|(x, y)| x.to_bits() == y.to_bits())
        && reloaded.b.to_bits() == model.b.to_bits()
        && reloaded == model;
    verdict(
        differing.is_empty() && bytes_equal && bits_equal && ra.errors.is_empty(),
        format!(
            "{} bundle files compared, {} differ; model save/load bit-exact: {}",
            names.len(),
            differing.len(),
            bytes_equal && bits_equal
        ),
    )
}

struct AnnotatorOutcome {
    accepted: usize,
    rejected_invalid: usize,
    duplicate_races: usize,
    anomalies: Vec<String>,
}

async fn run_annotator(client: reqwest::Client, base: String, annotator: String, token: String, seed: u64) -> AnnotatorOutcome {
    use serde_json::{json, Value};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AnnotatorOutcome {
        accepted: 0,
        rejected_invalid: 0,
        duplicate_races: 0,
        anomalies: Vec::new(),
    };
    let post = |body: Value| {
        let client = client.clone();
        let url = format!("{base}/api/ratings");
        async move { client.post(url).json(&body).send().await.map(|r| r.status().as_u16()).unwrap_or(0) }
    };
    loop {
        let url = format!("{base}/api/batch?annotator={annotator}&token={token}");
        let batch: Value = match client.get(url).send().await {
            Ok(r) => r.json().await.unwrap_or(Value::Null),
            Err(e) => {
                out.anomalies.push(format!("{annotator}: {e}"));
                return out;
            }
        };
        if batch["done"] == true {
            return out;
        }
        let ids: Vec<Value> = batch["images"]
            .as_array()
            .map(|a| a.iter().map(|im| im["image_id"].clone()).collect())
            .unwrap_or_default();
        let ratings: Vec<Value> = ids
            .iter()
            .map(|id| json!({"image_id": id, "rating": rng.random_range(0..3)}))
            .collect();
        let body = json!({"annotator": annotator, "token": token, "batch": batch["batch"], "ratings": ratings});

        match rng.random_range(0..4) {
            0 => {
                let mut bad = body.clone();
                bad["ratings"][rng.random_range(0..ids.len())]["rating"] = json!(3);
                let mut short = body.clone();
                short["ratings"].as_array_mut().unwrap().pop();
                for b in [bad, short] {
                    match post(b).await {
                        400 => out.rejected_invalid += 1,
                        s => out.anomalies.push(format!("{annotator}: invalid submission got {s}")),
                    }
                }
            }
            1 => {
                // the same batch twice at once: exactly one may win
                let (a, b) = tokio::join!(post(body.clone()), post(body.clone()));
                let mut codes = [a, b];
                codes.sort_unstable();
                if codes == [200, 409] {
                    out.duplicate_races += 1;
                    out.accepted += 1;
                } else {
                    out.anomalies.push(format!("{annotator}: concurrent duplicate got {codes:?}"));
                }
                continue;
            }
            _ => {}
        }
        match post(body.clone()).await {
            200 => out.accepted += 1,
            s => out.anomalies.push(format!("{annotator}: valid submission got {s}")),
        }
        if rng.random_bool(0.2) && post(body).await != 409 {
            out.anomalies.push(format!("{annotator}: resubmission not rejected as duplicate"));
        }
        tokio::task::yield_now().await;
    }
}

fn criterion_10() -> Verdict {
    use iconika_core::datamodel::{load_dataset, AnnotationBatch, RatingRecord};
    use iconika_service::{assign, export_dataset, router, Campaign, CampaignConfig, RedundancyGroup};
    use std::sync::Arc;

    let params = synthetic::FixtureParams {
        classes: 12,
        images_per_class: 40,
        ..Default::default()
    };
    let (data, _) = synthetic::fixture_dataset(5, &params);
    let train: Vec<String> = (0..12).map(|i| format!("train{i:02}")).collect();
    let test: Vec<String> = (0..4).map(|i| format!("test{i:02}")).collect();
    let config = CampaignConfig {
        batch_size: 5,
        classes_per_annotator: 12,
        groups: vec![
            RedundancyGroup {
                annotators: train[..6].to_vec(),
            },
            RedundancyGroup {
                annotators: test.clone(),
            },
        ],
        shared_set_size: 20,
        shared_classes: 4,
        train_annotators: train,
        test_annotators: test,
        tokens: BTreeMap::new(),
        admin_token: None,
        seed: 11,
        image_extension: "jpg".into(),
    };
    let assignment = assign(&config, &data).expect("assignment");
    let state = tempfile::tempdir().unwrap();
    let campaign = Arc::new(Campaign::create(state.path(), config.clone(), &assignment).expect("campaign"));
    let annotators: Vec<(String, String)> = config
        .annotators()
        .map(|(a, _)| (a.clone(), campaign.token(a).unwrap().to_string()))
        .collect();

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .unwrap();
    let outcomes: Vec<AnnotatorOutcome> = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = router(campaign.clone(), None, None);
        tokio::spawn(async move { axum::serve(listener, app).await });
        let client = reqwest::Client::new();
        let tasks: Vec<_> = annotators
            .iter()
            .enumerate()
            .map(|(i, (a, t))| tokio::spawn(run_annotator(client.clone(), base.clone(), a.clone(), t.clone(), 100 + i as u64)))
            .collect();
        let mut out = Vec::new();
        for t in tasks {
            out.push(t.await.unwrap());
        }
        out
    });

    let accepted: usize = outcomes.iter().map(|o| o.accepted).sum();
    let invalid: usize = outcomes.iter().map(|o| o.rejected_invalid).sum();
    let races: usize = outcomes.iter().map(|o| o.duplicate_races).sum();
    let anomalies: Vec<&String> = outcomes.iter().flat_map(|o| &o.anomalies).collect();
    let expected_batches = assignment.all_batches().count();

    let batch_of: BTreeMap<&str, &AnnotationBatch> =
        assignment.all_batches().map(|b| (b.batch_id.as_str(), b)).collect();
    let text = std::fs::read_to_string(state.path().join("ratings.jsonl")).unwrap();
    let mut schema_errors = 0;
    let mut keys = BTreeSet::new();
    let mut duplicates = 0;
    let mut per_batch: BTreeMap<String, usize> = BTreeMap::new();
    let lines = text.lines().count();
    for line in text.lines() {
        let Ok(r) = serde_json::from_str::<RatingRecord>(line) else {
            schema_errors += 1;
            continue;
        };
        let ok = r.rating <= 2
            && batch_of
                .get(r.batch_id.as_str())
                .is_some_and(|b| b.assigned_annotator == r.annotator_id && b.image_ids.contains(&r.image_id));
        schema_errors += usize::from(!ok);
        if !keys.insert((r.annotator_id.clone(), r.image_id.clone())) {
            duplicates += 1;
        }
        *per_batch.entry(r.batch_id).or_default() += 1;
    }
    let whole_batches = per_batch.values().all(|&n| n == 5);

    let out = tempfile::tempdir().unwrap();
    let export = export_dataset(state.path(), &data, out.path())
        .map_err(|e| e.to_string())
        .and_then(|m| load_dataset(&m).map_err(|e| e.to_string()));
    let export_ok = matches!(&export, Ok(d) if d.ratings.len() == lines);

    let pass = anomalies.is_empty()
        && accepted == expected_batches
        && lines == 5 * accepted
        && schema_errors == 0
        && duplicates == 0
        && whole_batches
        && export_ok;
    verdict(
        pass,
        format!(
            "16 annotators, {accepted}/{expected_batches} batches accepted, {lines} records (B x accepted = {}), \
             {invalid} invalid and {races} concurrent-duplicate submissions rejected, schema errors {schema_errors}, \
             duplicates {duplicates}, export {}{}",
            5 * accepted,
            match &export {
                Ok(d) => format!("loads with {} ratings", d.ratings.len()),
                Err(e) => format!("fails: {e}"),
            },
            if anomalies.is_empty() {
                String::new()
            } else {
                format!(", anomalies: {:?}", &anomalies[..anomalies.len().min(3)])
            }
        ),
    )
}

fn main() {
    type Criterion = (u32, &'static str, fn() -> Verdict);
    let criteria: Vec<Criterion> = vec![
        (1, "SRC oracle equivalence", criterion_1),
        (2, "AP oracle equivalence", criterion_2),
        (3, "solver correctness", criterion_3),
        (4, "planted ranking recovery", criterion_4),
        (5, "fusion dominance", criterion_5),
        (6, "indicator unit suite", criterion_6),
        (7, "DAP epsilon behaviour", criterion_7),
        (8, "agreement protocol", criterion_8),
        (9, "determinism and persistence", criterion_9),
        (10, "service safety", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let v = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("criterion {n} ({name}): {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
