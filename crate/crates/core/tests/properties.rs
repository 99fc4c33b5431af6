use std::collections::BTreeSet;

use iconika_core::datamodel::{split_half, AnnotationBatch, FeatureMatrix, RatingRecord, Split};
use iconika_core::rankstats::{average_precision, fractional_ranks, spearman};
use iconika_core::solvers::{
    build_pairs, hinge_objective, predict, train_ranking_svm, LinearModel, Objective, RankPair, TrainParams,
};
use iconika_core::synthetic::{fixture_dataset, FixtureParams};
use proptest::prelude::*;

fn small_ints(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-4i32..5).prop_map(f64::from), 2..max_len)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn brute_rank(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let tied = v.iter().filter(|y| *y == x).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

fn non_constant(v: &[f64]) -> bool {
    v.iter().any(|x| *x != v[0])
}

proptest! {
    #[test]
    fn ranks_sum_and_match_brute_force(v in small_ints(12)) {
        let r = fractional_ranks(&v).unwrap();
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        prop_assert_eq!(r, brute_rank(&v));
    }

    #[test]
    fn spearman_symmetric((a, b) in (2usize..10).prop_flat_map(|n| {
        (prop::collection::vec(-3i32..4, n), prop::collection::vec(-3i32..4, n))
    })) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = spearman(&a, &b).unwrap();
        let ba = spearman(&b, &a).unwrap();
        prop_assert_eq!(ab.rho, ba.rho);
        if non_constant(&a) && non_constant(&b) {
            prop_assert!((ab.rho - pearson(&brute_rank(&a), &brute_rank(&b))).abs() < 1e-12);
        } else {
            prop_assert_eq!(ab.rho, 0.0);
            prop_assert!(ab.degeneracy.is_some());
        }
    }

    #[test]
    fn spearman_self_is_one(a in small_ints(15)) {
        prop_assume!(non_constant(&a));
        prop_assert!((spearman(&a, &a).unwrap().rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_invariant(
        (a, b) in (3usize..20).prop_flat_map(|n| {
            (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))
        }),
        scale in 0.1f64..10.0,
    ) {
        let base = spearman(&a, &b).unwrap().rho;
        let t: Vec<f64> = a.iter().map(|x| scale * x.powi(3) + x.exp()).collect();
        prop_assert!((spearman(&t, &b).unwrap().rho - base).abs() < 1e-12);
        let neg: Vec<f64> = b.iter().map(|y| -y).collect();
        prop_assert!((spearman(&a, &neg).unwrap().rho + base).abs() < 1e-12);
    }

    #[test]
    fn ap_one_iff_positives_first(
        (scores, ratings) in (1usize..12).prop_flat_map(|n| {
            (prop::collection::vec(-3i32..4, n), prop::collection::vec(0u8..3, n))
        })
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ratings: Vec<f64> = ratings.into_iter().map(f64::from).collect();
        let positives = ratings.iter().filter(|r| **r > 1.5).count();
        prop_assume!(positives > 0);
        let ap = average_precision(&scores, &ratings, 1.5).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        // stable descending order, ties in input order
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
        let first_ok = order[..positives].iter().all(|&i| ratings[i] > 1.5);
        prop_assert_eq!(ap == 1.0, first_ok);
    }

    #[test]
    fn split_half_is_a_partition(seed in any::<u64>(), data_seed in 0u64..4) {
        let (d, _) = fixture_dataset(data_seed, &FixtureParams::default());
        let h = split_half(&d, seed).unwrap();
        let first: BTreeSet<String> = h.first.records.keys().cloned().collect();
        let second: BTreeSet<String> = h.second.records.keys().cloned().collect();
        let train: BTreeSet<String> = d.ids_in(Split::Train).into_iter().collect();
        prop_assert!(first.is_disjoint(&second));
        prop_assert_eq!(first.union(&second).cloned().collect::<BTreeSet<_>>(), train);
        prop_assert_eq!(split_half(&d, seed).unwrap().first.records.len(), first.len());
    }

    #[test]
    fn pair_count_matches_strict_orderings(ratings in prop::collection::vec(prop::collection::vec(0u8..3, 5), 1..6)) {
        let mut recs = Vec::new();
        let mut batches = Vec::new();
        let mut expected = 0;
        for (b, rs) in ratings.iter().enumerate() {
            let ids: Vec<String> = (0..5).map(|i| format!("b{b}i{i}")).collect();
            batches.push(AnnotationBatch {
                batch_id: format!("b{b}"),
                class_id: 1,
                image_ids: ids.clone(),
                assigned_annotator: "a".into(),
            });
            for (id, r) in ids.iter().zip(rs) {
                recs.push(RatingRecord {
                    annotator_id: "a".into(),
                    batch_id: format!("b{b}"),
                    image_id: id.clone(),
                    rating: *r,
                    timestamp: 0,
                });
            }
            expected += rs.iter().flat_map(|x| rs.iter().map(move |y| x > y)).filter(|g| *g).count();
        }
        prop_assert_eq!(build_pairs(&recs, &batches).len(), expected);
    }

    #[test]
    fn predict_ranking_invariant_to_positive_scale(
        w in prop::collection::vec(-2.0f64..2.0, 3),
        scale in 0.01f64..100.0,
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..15),
    ) {
        let fm = FeatureMatrix::from_rows("x", 3, rows.into_iter().enumerate().map(|(i, r)| (format!("i{i:02}"), r))).unwrap();
        let mut m = LinearModel::zeros(3, Objective::Ranking);
        m.w = w.clone();
        let mut scaled = m.clone();
        scaled.w = w.iter().map(|v| v * scale).collect();
        let s = predict(&m, &fm).unwrap();
        let t = predict(&scaled, &fm).unwrap();
        // argsort equality, except among scores equal up to rounding
        for (a, sa) in &s {
            for (b, sb) in &s {
                if (sa - sb).abs() > 1e-9 {
                    prop_assert_eq!(sa < sb, t[a] < t[b]);
                }
            }
        }
    }
}

fn ranking_fixture(seed: u64, shift: f64) -> (FeatureMatrix, Vec<RankPair>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(String, Vec<f64>)> = (0..12)
        .map(|i| (format!("x{i:02}"), (0..3).map(|_| rng.random_range(-4i32..5) as f64 + shift).collect()))
        .collect();
    let mut pairs = Vec::new();
    for _ in 0..20 {
        let (i, j) = (rng.random_range(0..12), rng.random_range(0..12));
        if i != j {
            pairs.push(RankPair {
                pos_id: rows[i].0.clone(),
                neg_id: rows[j].0.clone(),
                annotator_id: "a".into(),
                batch_id: "b".into(),
            });
        }
    }
    (FeatureMatrix::from_rows("x", 3, rows).unwrap(), pairs)
}

#[test]
fn ranking_svm_translation_invariant() {
    let params = TrainParams {
        lambda: 1e-2,
        epochs: 30,
        seed: 4,
        ..TrainParams::default()
    };
    for seed in 0..5 {
        let (f, pairs) = ranking_fixture(seed, 0.0);
        let (g, _) = ranking_fixture(seed, 16.0);
        let a = train_ranking_svm(&f, &pairs, &params).unwrap();
        let b = train_ranking_svm(&g, &pairs, &params).unwrap();
        assert_eq!(a.w, b.w, "seed {seed}");
    }
}

fn ranking_objective(model: &LinearModel, f: &FeatureMatrix, pairs: &[RankPair]) -> f64 {
    let diffs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let (x, y) = (f.get(&p.pos_id).unwrap(), f.get(&p.neg_id).unwrap());
            x.iter().zip(y).map(|(a, b)| a - b).collect()
        })
        .collect();
    hinge_objective(&model.w, 0.0, &diffs, &vec![1.0; diffs.len()], model.lambda)
}

#[test]
fn duplicated_data_reaches_the_same_objective() {
    let params = TrainParams {
        lambda: 1e-2,
        epochs: 200,
        seed: 1,
        ..TrainParams::default()
    };
    for seed in 0..5 {
        let (f, pairs) = ranking_fixture(seed, 0.0);
        let mut g = f.clone();
        let mut dup = pairs.clone();
        for (id, row) in &f.rows {
            g.insert(format!("{id}'"), row.clone()).unwrap();
        }
        for p in &pairs {
            dup.push(RankPair {
                pos_id: format!("{}'", p.pos_id),
                neg_id: format!("{}'", p.neg_id),
                ..p.clone()
            });
        }
        let a = train_ranking_svm(&f, &pairs, &params).unwrap();
        let b = train_ranking_svm(&g, &dup, &params).unwrap();
        let (oa, ob) = (ranking_objective(&a, &f, &pairs), ranking_objective(&b, &f, &pairs));
        assert!((oa - ob).abs() <= 0.02 * oa.max(ob), "seed {seed}: {oa} vs {ob}");
    }
}
