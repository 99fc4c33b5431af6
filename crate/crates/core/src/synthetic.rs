//! Seeded generators for planted-signal datasets and annotation campaigns.
//!
//! Each image gets a latent iconicity drawn from a standard normal; every
//! observable (boxes, parts, attributes, features, ratings) is a noisy
//! function of it, so the whole pipeline can be checked end to end.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::datamodel::{
    AnnotationBatch, BoundingBox, Dataset, DatasetConstants, DetectedBox, FeatureMatrix,
    ImageRecord, RatingRecord, Split,
};
use crate::indicators::{BoxSource, IndicatorConfig, IndicatorKind, SuiteConfig};
use crate::pipeline::{DipConfig, ExperimentConfig, FusionConfig};
use crate::rankstats;
use crate::solvers::Objective;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Three-level rating of a noisy score: below -0.5 is 0, above 0.5 is 2.
pub fn quantize(score: f64) -> u8 {
    if score > 0.5 {
        2
    } else if score > -0.5 {
        1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureParams {
    pub classes: u32,
    /// Must be a multiple of `2 * batch_size`; half of each class is train.
    pub images_per_class: usize,
    pub dim: usize,
    pub parts: usize,
    pub attributes: usize,
    pub batch_size: usize,
    /// Every batch is rated by each annotator of its split's group.
    pub annotators_per_split: usize,
    pub rating_noise: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            classes: 4,
            images_per_class: 20,
            dim: 8,
            parts: 15,
            attributes: 12,
            batch_size: 5,
            annotators_per_split: 2,
            rating_noise: 0.4,
        }
    }
}

/// A complete dataset with every annotation kind, one feature matrix named
/// `fv`, an inline external score `aesthetic`, and the latent iconicity.
pub fn fixture_dataset(seed: u64, params: &FixtureParams) -> (Dataset, BTreeMap<String, f64>) {
    assert!(
        params.images_per_class.is_multiple_of(2 * params.batch_size),
        "images_per_class must be a multiple of 2 * batch_size"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..params.dim).map(|_| gauss(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction: Vec<f64> = direction.iter().map(|v| v / norm).collect();

    let mut records = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut latent = BTreeMap::new();
    let mut rows = Vec::new();
    let mut ratings = Vec::new();
    let mut batches = Vec::new();
    let (w, h) = (200u32, 160u32);

    for class_id in 1..=params.classes {
        let center: Vec<f64> = (0..params.dim).map(|_| 2.0 * gauss(&mut rng)).collect();
        let signature: Vec<bool> = (0..params.attributes).map(|_| rng.random_bool(0.5)).collect();
        let mut class_ids = Vec::new();
        for j in 0..params.images_per_class {
            let id = format!("c{class_id:02}_{j:03}");
            let z = gauss(&mut rng);
            let mut rec = ImageRecord::new(&id, class_id, w, h);

            let frac = sigmoid(0.8 * z + 0.3 * gauss(&mut rng)).clamp(0.05, 0.95);
            let (bw, bh) = (frac * w as f64, frac * h as f64);
            let offset = 0.25 * sigmoid(-z) * (w as f64 - bw);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let cx = (w as f64 / 2.0 + offset * angle.cos()).clamp(bw / 2.0, w as f64 - bw / 2.0);
            let cy = (h as f64 / 2.0 + offset * angle.sin()).clamp(bh / 2.0, h as f64 - bh / 2.0);
            let gt = BoundingBox {
                x: cx - bw / 2.0,
                y: cy - bh / 2.0,
                w: bw,
                h: bh,
            };
            rec.gt_box = Some(gt);
            let jitter = |rng: &mut ChaCha8Rng| 0.03 * w as f64 * gauss(rng);
            let det = BoundingBox {
                x: (gt.x + jitter(&mut rng)).max(0.0),
                y: (gt.y + jitter(&mut rng)).max(0.0),
                w: gt.w,
                h: gt.h,
            };
            rec.det_box = Some(DetectedBox {
                bbox: det.clamped(w as f64, h as f64).unwrap_or(gt),
                confidence: sigmoid(1.0 + z),
            });
            let visible = sigmoid(1.0 + z);
            rec.parts = Some((0..params.parts).map(|_| rng.random_bool(visible)).collect());
            let agree = sigmoid(1.5 + z);
            rec.attributes = Some(
                signature
                    .iter()
                    .map(|&s| if rng.random_bool(agree) { s } else { !s })
                    .collect(),
            );
            rec.external_scores
                .insert("aesthetic".into(), 0.5 * z + 0.8 * gauss(&mut rng));

            let spread = 0.5 + sigmoid(-z);
            let x: Vec<f64> = center
                .iter()
                .zip(&direction)
                .map(|(c, d)| c + 0.7 * z * d + spread * 0.5 * gauss(&mut rng))
                .collect();
            rows.push((id.clone(), x));
            records.insert(id.clone(), rec);
            latent.insert(id.clone(), z);
            class_ids.push(id);
        }
        class_ids.shuffle(&mut rng);
        let half = params.images_per_class / 2;
        for (split, ids) in [(Split::Train, &class_ids[..half]), (Split::Test, &class_ids[half..])] {
            let tag = match split {
                Split::Train => "tr",
                Split::Test => "te",
            };
            for id in ids {
                splits.insert(id.clone(), split);
            }
            for (bi, chunk) in ids.chunks(params.batch_size).enumerate() {
                for a in 0..params.annotators_per_split {
                    let annotator = format!("{tag}{a}");
                    let batch_id = format!("{tag}-c{class_id:02}-b{bi}-{annotator}");
                    for id in chunk {
                        let noisy = latent[id] + params.rating_noise * gauss(&mut rng);
                        ratings.push(RatingRecord {
                            annotator_id: annotator.clone(),
                            batch_id: batch_id.clone(),
                            image_id: id.clone(),
                            rating: quantize(noisy),
                            timestamp: 0,
                        });
                    }
                    batches.push(AnnotationBatch {
                        batch_id,
                        class_id,
                        image_ids: chunk.to_vec(),
                        assigned_annotator: annotator,
                    });
                }
            }
        }
    }

    ratings.sort_by(|a, b| {
        (&a.annotator_id, &a.batch_id, &a.image_id).cmp(&(&b.annotator_id, &b.batch_id, &b.image_id))
    });
    batches.sort_by(|a, b| (&a.batch_id, &a.assigned_annotator).cmp(&(&b.batch_id, &b.assigned_annotator)));
    // stored as f32 on disk; keep the fixture exactly representable
    let rows = rows
        .into_iter()
        .map(|(id, r): (String, Vec<f64>)| (id, r.into_iter().map(|v| v as f32 as f64).collect()));
    let features = FeatureMatrix::from_rows("fv", params.dim, rows).expect("finite rows");
    let dataset = Dataset {
        constants: DatasetConstants {
            k: params.classes,
            p: params.parts,
            m: params.attributes,
            batch_size: params.batch_size,
        },
        records,
        splits,
        features: BTreeMap::from([("fv".to_string(), features)]),
        ratings,
        batches,
    };
    (dataset, latent)
}

/// The default fixture at seed 0.
pub fn tiny_dataset() -> Dataset {
    fixture_dataset(0, &FixtureParams::default()).0
}

/// Experiment over [`fixture_dataset`]: the eight oracle indicators, both
/// fusions, and optionally a direct predictor on `fv`. Epochs are kept low
/// so the run takes well under a second.
pub fn fixture_config(dip: bool) -> ExperimentConfig {
    let ind = |name: &str, kind| IndicatorConfig {
        name: name.into(),
        kind,
    };
    let mut suite = SuiteConfig::new(vec![
        ind("bb_size", IndicatorKind::BbSize { source: BoxSource::Gt }),
        ind("bb_dist2center", IndicatorKind::Dist2Center { source: BoxSource::Gt }),
        ind("occlusion", IndicatorKind::Occlusion),
        ind("cluster", IndicatorKind::Cluster { feature: "fv".into() }),
        ind("svm", IndicatorKind::ClassSvm { feature: "fv".into() }),
        ind("svm_att", IndicatorKind::SvmAtt),
        ind("i2c_att", IndicatorKind::I2cAtt),
        ind("dap_orac", IndicatorKind::DapOracle),
    ]);
    suite.aux_epochs = 20;
    ExperimentConfig {
        seed: 7,
        lambda_grid: vec![1e-3, 1e-1],
        epochs: 20,
        suite,
        fusion: FusionConfig::default(),
        dip: dip.then(|| DipConfig {
            feature: "fv".into(),
            objective: Objective::Ranking,
        }),
        agreement_groups: None,
    }
}

/// A ranking campaign whose ratings come from a planted linear scorer.
#[derive(Clone, Debug)]
pub struct PlantedRanking {
    pub features: FeatureMatrix,
    pub w_true: Vec<f64>,
    pub planted: BTreeMap<String, f64>,
    pub train_ratings: Vec<RatingRecord>,
    pub train_batches: Vec<AnnotationBatch>,
    pub test_ratings: Vec<RatingRecord>,
    pub test_batches: Vec<AnnotationBatch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRankingParams {
    pub batches: usize,
    pub batch_size: usize,
    pub dim: usize,
    /// Probability that a rating is replaced by a uniformly random one.
    pub label_noise: f64,
    /// Fraction of batches held out.
    pub test_fraction: f64,
}

impl Default for PlantedRankingParams {
    fn default() -> Self {
        PlantedRankingParams {
            batches: 200,
            batch_size: 5,
            dim: 10,
            label_noise: 0.1,
            test_fraction: 0.25,
        }
    }
}

/// Features are standard normal; the planted score is `w_true . x` with a
/// unit `w_true`; ratings threshold the planted score at its terciles
/// (`-0.43`, `0.43`) and are then corrupted with `label_noise`.
pub fn planted_ranking(seed: u64, params: &PlantedRankingParams) -> PlantedRanking {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..params.dim).map(|_| gauss(&mut rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let w_true: Vec<f64> = w.iter().map(|v| v / norm).collect();
    let n_test = (params.batches as f64 * params.test_fraction).round() as usize;
    let mut rows = Vec::new();
    let mut planted = BTreeMap::new();
    let mut out = PlantedRanking {
        features: FeatureMatrix::new("planted", params.dim),
        w_true: w_true.clone(),
        planted: BTreeMap::new(),
        train_ratings: Vec::new(),
        train_batches: Vec::new(),
        test_ratings: Vec::new(),
        test_batches: Vec::new(),
    };
    let tercile = 0.4307;
    for b in 0..params.batches {
        let test = b >= params.batches - n_test;
        let batch_id = format!("b{b:04}");
        let mut ids = Vec::new();
        for i in 0..params.batch_size {
            let id = format!("b{b:04}_{i}");
            let x: Vec<f64> = (0..params.dim).map(|_| gauss(&mut rng)).collect();
            let s: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
            let mut rating = if s > tercile {
                2
            } else if s > -tercile {
                1
            } else {
                0
            };
            if rng.random_bool(params.label_noise) {
                rating = rng.random_range(0..3u8);
            }
            let rec = RatingRecord {
                annotator_id: "planted".into(),
                batch_id: batch_id.clone(),
                image_id: id.clone(),
                rating,
                timestamp: 0,
            };
            if test {
                out.test_ratings.push(rec);
            } else {
                out.train_ratings.push(rec);
            }
            planted.insert(id.clone(), s);
            rows.push((id.clone(), x));
            ids.push(id);
        }
        let batch = AnnotationBatch {
            batch_id,
            class_id: 1,
            image_ids: ids,
            assigned_annotator: "planted".into(),
        };
        if test {
            out.test_batches.push(batch);
        } else {
            out.train_batches.push(batch);
        }
    }
    out.features = FeatureMatrix::from_rows("planted", params.dim, rows).expect("finite rows");
    out.planted = planted;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub classes: u32,
    pub images_per_class: usize,
    pub annotators: usize,
    /// Planted weights of the three indicators, applied to standardised values.
    pub weights: [f64; 3],
    /// Raw scale of each indicator, undone by whitening.
    pub scales: [f64; 3],
    pub rating_noise: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            classes: 10,
            images_per_class: 40,
            annotators: 3,
            weights: [1.0, 0.8, 0.6],
            scales: [1.0, 10.0, 0.1],
            rating_noise: 0.5,
        }
    }
}

/// Names of the external scores carried by [`planted_fusion`] datasets.
pub const FUSION_INDICATORS: [&str; 3] = ["ind_a", "ind_b", "ind_c"];

/// Each image carries three independent indicators as external scores;
/// its planted iconicity is their weighted sum (on the standard scale) and
/// every annotator rates it with independent noise.
pub fn planted_fusion(seed: u64, params: &FusionParams) -> (Dataset, BTreeMap<String, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch_size = 5;
    assert!(params.images_per_class.is_multiple_of(2 * batch_size));
    let wnorm = params.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let mut records = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut planted = BTreeMap::new();
    let mut ratings = Vec::new();
    let mut batches = Vec::new();
    for class_id in 1..=params.classes {
        let mut ids = Vec::new();
        for j in 0..params.images_per_class {
            let id = format!("c{class_id:02}_{j:03}");
            let mut rec = ImageRecord::new(&id, class_id, 100, 100);
            let mut t = 0.0;
            for (k, name) in FUSION_INDICATORS.iter().enumerate() {
                let v = gauss(&mut rng);
                t += params.weights[k] * v / wnorm;
                rec.external_scores.insert((*name).into(), params.scales[k] * v);
            }
            planted.insert(id.clone(), t);
            records.insert(id.clone(), rec);
            ids.push(id);
        }
        let half = params.images_per_class / 2;
        for (split, part) in [(Split::Train, &ids[..half]), (Split::Test, &ids[half..])] {
            for id in part {
                splits.insert(id.clone(), split);
            }
            for (bi, chunk) in part.chunks(batch_size).enumerate() {
                for a in 0..params.annotators {
                    let annotator = format!("a{a}");
                    let batch_id = format!("c{class_id:02}-{split:?}-{bi}-{annotator}").to_lowercase();
                    for id in chunk {
                        let noisy = planted[id] + params.rating_noise * gauss(&mut rng);
                        ratings.push(RatingRecord {
                            annotator_id: annotator.clone(),
                            batch_id: batch_id.clone(),
                            image_id: id.clone(),
                            rating: quantize(noisy),
                            timestamp: 0,
                        });
                    }
                    batches.push(AnnotationBatch {
                        batch_id,
                        class_id,
                        image_ids: chunk.to_vec(),
                        assigned_annotator: annotator,
                    });
                }
            }
        }
    }
    ratings.sort_by(|a, b| {
        (&a.annotator_id, &a.batch_id, &a.image_id).cmp(&(&b.annotator_id, &b.batch_id, &b.image_id))
    });
    batches.sort_by(|a, b| (&a.batch_id, &a.assigned_annotator).cmp(&(&b.batch_id, &b.assigned_annotator)));
    let dataset = Dataset {
        constants: DatasetConstants {
            k: params.classes,
            p: 0,
            m: 0,
            batch_size,
        },
        records,
        splits,
        features: BTreeMap::new(),
        ratings,
        batches,
    };
    (dataset, planted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementParams {
    pub groups: usize,
    pub annotators_per_group: usize,
    pub shared_images: usize,
    pub shared_classes: u32,
    /// Std of each annotator's per-image noise added to the planted score.
    pub noise: f64,
}

impl Default for AgreementParams {
    fn default() -> Self {
        AgreementParams {
            groups: 2,
            annotators_per_group: 10,
            shared_images: 50,
            shared_classes: 10,
            noise: 0.8,
        }
    }
}

/// Simulated redundancy-group campaign.
#[derive(Clone, Debug)]
pub struct AgreementCampaign {
    pub ratings: Vec<RatingRecord>,
    pub groups: Vec<Vec<String>>,
    pub planted: BTreeMap<String, f64>,
}

/// Planted scores of one group's shared set, then each annotator's ratings.
fn agreement_draw(
    rng: &mut ChaCha8Rng,
    params: &AgreementParams,
    planted: &[f64],
) -> Vec<Vec<u8>> {
    let noise = Normal::new(0.0, params.noise).expect("noise std is finite and non-negative");
    (0..params.annotators_per_group)
        .map(|_| {
            planted
                .iter()
                .map(|&z| quantize(z + noise.sample(rng)))
                .collect()
        })
        .collect()
}

fn planted_scores(rng: &mut ChaCha8Rng, params: &AgreementParams) -> Vec<Vec<f64>> {
    (0..params.groups)
        .map(|_| (0..params.shared_images).map(|_| gauss(rng)).collect())
        .collect()
}

/// One campaign: every annotator of a group rates the group's shared images,
/// presented in batches of 5 images of a class.
pub fn simulate_agreement(seed: u64, params: &AgreementParams) -> AgreementCampaign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted_by_group = planted_scores(&mut rng, params);
    let per_class = params.shared_images.div_ceil(params.shared_classes as usize);
    let mut out = AgreementCampaign {
        ratings: Vec::new(),
        groups: Vec::new(),
        planted: BTreeMap::new(),
    };
    for (g, planted) in planted_by_group.iter().enumerate() {
        let ids: Vec<String> = (0..planted.len())
            .map(|i| format!("g{g}_c{:02}_{i:03}", i / per_class + 1))
            .collect();
        for (id, z) in ids.iter().zip(planted) {
            out.planted.insert(id.clone(), *z);
        }
        let draws = agreement_draw(&mut rng, params, planted);
        let mut members = Vec::new();
        for (a, ratings) in draws.into_iter().enumerate() {
            let annotator = format!("g{g}a{a:02}");
            for (i, (id, r)) in ids.iter().zip(ratings).enumerate() {
                out.ratings.push(RatingRecord {
                    annotator_id: annotator.clone(),
                    batch_id: format!("g{g}-s{:03}-{annotator}", i / 5),
                    image_id: id.clone(),
                    rating: r,
                    timestamp: 0,
                });
            }
            members.push(annotator);
        }
        out.groups.push(members);
    }
    out
}

/// Expected per-group mean pairwise SRC of [`simulate_agreement`] with the
/// same seed: the planted scores are drawn exactly as in the campaign and
/// the annotator noise is averaged over `draws` independent redraws.
///
/// Works directly on rating vectors, without ids or records.
pub fn expected_group_agreement(seed: u64, params: &AgreementParams, draws: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted_by_group = planted_scores(&mut rng, params);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    planted_by_group
        .iter()
        .map(|planted| {
            let mut total = 0.0;
            let mut count = 0usize;
            for _ in 0..draws {
                let ratings = agreement_draw(&mut noise_rng, params, planted);
                let as_f64: Vec<Vec<f64>> = ratings
                    .iter()
                    .map(|r| r.iter().map(|&v| v as f64).collect())
                    .collect();
                let mut sum = 0.0;
                let mut pairs = 0usize;
                for i in 0..as_f64.len() {
                    for j in i + 1..as_f64.len() {
                        let r = rankstats::spearman(&as_f64[i], &as_f64[j])
                            .expect("equal lengths");
                        if r.degeneracy.is_none() {
                            sum += r.rho;
                            pairs += 1;
                        }
                    }
                }
                if pairs > 0 {
                    total += sum / pairs as f64;
                    count += 1;
                }
            }
            total / count.max(1) as f64
        })
        .collect()
}
