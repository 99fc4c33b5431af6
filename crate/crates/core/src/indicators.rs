//! Per-image iconicity indicators.
//!
//! Every indicator is oriented so that a higher score means "more iconic".
//! Class-independent indicators read box geometry, part visibility or
//! precomputed external scores; class-dependent ones compare an image with
//! its own class through prototypes or one-vs-rest linear models.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, FeatureMatrix, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::solvers::{load_model, train_binary_svm, LinearModel, TrainParams};

pub const DEFAULT_DAP_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    Gt,
    Det,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    Predicted,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScores {
    pub indicator_name: String,
    pub scores: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl IndicatorScores {
    pub fn new(name: impl Into<String>, provenance: Provenance) -> Self {
        IndicatorScores {
            indicator_name: name.into(),
            scores: BTreeMap::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn missing(record: &ImageRecord, what: &'static str) -> Error {
    Error::AnnotationMissing {
        image_id: record.image_id.clone(),
        what,
    }
}

fn select_box(record: &ImageRecord, source: BoxSource) -> Result<crate::datamodel::BoundingBox> {
    match source {
        BoxSource::Gt => record.gt_box.ok_or_else(|| missing(record, "gt_box")),
        BoxSource::Det => record
            .det_box
            .map(|d| d.bbox)
            .ok_or_else(|| missing(record, "det_box")),
    }
}

/// Fraction of the image covered by the box.
pub fn bb_size(record: &ImageRecord, source: BoxSource) -> Result<f64> {
    let b = select_box(record, source)?;
    Ok(b.area() / (record.width as f64 * record.height as f64))
}

/// Negated distance between box and image centres, in image diagonals.
pub fn bb_dist2center(record: &ImageRecord, source: BoxSource) -> Result<f64> {
    let b = select_box(record, source)?;
    let (w, h) = (record.width as f64, record.height as f64);
    let (cx, cy) = b.center();
    let d = (cx - w / 2.0).hypot(cy - h / 2.0);
    Ok(-d / w.hypot(h))
}

/// Number of visible parts.
pub fn occlusion_score(record: &ImageRecord) -> Result<f64> {
    let parts = record.parts.as_ref().ok_or_else(|| missing(record, "parts"))?;
    Ok(parts.iter().filter(|&&v| v).count() as f64)
}

/// A score computed upstream and stored with the record.
pub fn external_score(record: &ImageRecord, name: &str) -> Result<f64> {
    record
        .external_scores
        .get(name)
        .copied()
        .ok_or_else(|| Error::UnknownScore {
            name: name.to_string(),
            available: record.external_scores.keys().cloned().collect(),
        })
}

/// Per-class summary: mean feature vector and mean attribute vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub mu: Vec<f64>,
    pub attr_mean: Option<Vec<f64>>,
    /// `attr_mean >= 0.5`.
    pub attr_signature: Option<Vec<bool>>,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

fn attribute_stats(train: &Dataset, ids: &[&String]) -> (Option<Vec<f64>>, Option<Vec<bool>>) {
    let attrs: Vec<Vec<f64>> = ids
        .iter()
        .filter_map(|id| train.records[*id].attributes.as_ref())
        .map(|a| a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let mean = mean_rows(attrs.iter().map(Vec::as_slice), train.constants.m);
    let sig = mean.as_ref().map(|m| m.iter().map(|&v| v >= 0.5).collect());
    (mean, sig)
}

fn train_ids_by_class(train: &Dataset) -> BTreeMap<u32, Vec<&String>> {
    let mut by_class: BTreeMap<u32, Vec<&String>> = BTreeMap::new();
    for (id, rec) in &train.records {
        if train.splits.get(id) == Some(&Split::Train) {
            by_class.entry(rec.class_id).or_default().push(id);
        }
    }
    by_class
}

/// Prototypes for every class with train images: the mean feature row and,
/// when attribute annotations exist, the mean attribute vector and its
/// binarisation at 0.5.
pub fn build_prototypes(
    train: &Dataset,
    features: &FeatureMatrix,
) -> Result<(BTreeMap<u32, ClassPrototype>, Vec<String>)> {
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for (class_id, ids) in train_ids_by_class(train) {
        let mu = mean_rows(ids.iter().filter_map(|id| features.get(id)), features.dim)
            .ok_or_else(|| {
                Error::Degenerate(format!(
                    "class {class_id} has no train image with {} features",
                    features.feature_name
                ))
            })?;
        let (attr_mean, attr_signature) = attribute_stats(train, &ids);
        if attr_mean.is_none() {
            let msg = format!("class {class_id}: no attribute annotations; attribute prototype absent");
            warn!("{msg}");
            warnings.push(msg);
        }
        out.insert(
            class_id,
            ClassPrototype {
                class_id,
                mu,
                attr_mean,
                attr_signature,
            },
        );
    }
    Ok((out, warnings))
}

/// Attribute-only prototypes (`mu` empty) for classes with annotated train images.
pub fn build_attribute_prototypes(train: &Dataset) -> BTreeMap<u32, ClassPrototype> {
    train_ids_by_class(train)
        .into_iter()
        .filter_map(|(class_id, ids)| {
            let (attr_mean, attr_signature) = attribute_stats(train, &ids);
            attr_mean.map(|m| {
                (
                    class_id,
                    ClassPrototype {
                        class_id,
                        mu: Vec::new(),
                        attr_mean: Some(m),
                        attr_signature,
                    },
                )
            })
        })
        .collect()
}

/// Negative squared distance to the class mean.
pub fn cluster_score(x: &[f64], proto: &ClassPrototype) -> f64 {
    -x.iter()
        .zip(&proto.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

/// Response of the image's one-vs-rest class model.
pub fn class_svm_score(x: &[f64], model: &LinearModel) -> f64 {
    model.score(x)
}

/// Negative Euclidean distance between the attribute vector and the class
/// mean attribute vector.
pub fn i2c_att_score(attributes: &[bool], proto: &ClassPrototype) -> Result<f64> {
    let c = proto
        .attr_mean
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("class {} has no attribute mean", proto.class_id)))?;
    if c.len() != attributes.len() {
        return Err(Error::invalid(format!(
            "attribute length {} does not match class vector {}",
            attributes.len(),
            c.len()
        )));
    }
    let d2: f64 = attributes
        .iter()
        .zip(c)
        .map(|(&a, c)| {
            let d = if a { 1.0 } else { 0.0 } - c;
            d * d
        })
        .sum();
    Ok(-d2.sqrt())
}

/// Log of the DAP likelihood `prod_m q_m`, where `q_m` is the predicted
/// probability of the class signature's value for attribute `m`, clamped to
/// `[epsilon, 1 - epsilon]`.
pub fn dap_score(attr_probs: &[f64], proto: &ClassPrototype, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 0.5)")));
    }
    let sig = proto.attr_signature.as_ref().ok_or_else(|| {
        Error::invalid(format!("class {} has no attribute signature", proto.class_id))
    })?;
    if sig.len() != attr_probs.len() {
        return Err(Error::invalid(format!(
            "{} attribute probabilities for a signature of length {}",
            attr_probs.len(),
            sig.len()
        )));
    }
    Ok(attr_probs
        .iter()
        .zip(sig)
        .map(|(&p, &s)| {
            let q = if s { p } else { 1.0 - p };
            q.clamp(epsilon, 1.0 - epsilon).ln()
        })
        .sum())
}

pub fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn bools_to_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Which computation an indicator runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndicatorKind {
    BbSize {
        source: BoxSource,
    },
    Dist2Center {
        source: BoxSource,
    },
    Occlusion,
    /// A stored score, or `w.x + b` of a saved model over a feature.
    External {
        #[serde(default)]
        score: Option<String>,
        #[serde(default)]
        model: Option<PathBuf>,
        #[serde(default)]
        feature: Option<String>,
    },
    Cluster {
        feature: String,
    },
    ClassSvm {
        feature: String,
    },
    SvmAtt,
    I2cAtt,
    DapOracle,
    DapPredicted {
        feature: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: IndicatorKind,
}

impl IndicatorConfig {
    pub fn provenance(&self) -> Provenance {
        match &self.kind {
            IndicatorKind::BbSize { source: BoxSource::Gt }
            | IndicatorKind::Dist2Center { source: BoxSource::Gt }
            | IndicatorKind::Occlusion
            | IndicatorKind::SvmAtt
            | IndicatorKind::I2cAtt
            | IndicatorKind::DapOracle => Provenance::Oracle,
            IndicatorKind::External { .. } => Provenance::External,
            _ => Provenance::Predicted,
        }
    }
}

fn default_aux_lambda() -> f64 {
    1e-2
}

fn default_aux_epochs() -> usize {
    TrainParams::default().epochs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub indicators: Vec<IndicatorConfig>,
    #[serde(default = "default_aux_lambda")]
    pub aux_lambda: f64,
    #[serde(default = "default_aux_epochs")]
    pub aux_epochs: usize,
    #[serde(default = "default_epsilon")]
    pub dap_epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_DAP_EPSILON
}

impl SuiteConfig {
    pub fn new(indicators: Vec<IndicatorConfig>) -> Self {
        SuiteConfig {
            indicators,
            aux_lambda: default_aux_lambda(),
            aux_epochs: default_aux_epochs(),
            dap_epsilon: DEFAULT_DAP_EPSILON,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("indicator config: {e}")))
    }
}

/// Either a trained attribute classifier or, when the train set never (or
/// always) shows the attribute, its constant frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttributeClassifier {
    Model(LinearModel),
    Constant(f64),
}

impl AttributeClassifier {
    pub fn probability(&self, x: &[f64]) -> f64 {
        match self {
            AttributeClassifier::Model(m) => sigmoid(m.score(x)),
            AttributeClassifier::Constant(p) => *p,
        }
    }
}

/// Models and prototypes learned on the train split for class-dependent
/// indicators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxModels {
    pub prototypes: BTreeMap<String, BTreeMap<u32, ClassPrototype>>,
    pub attribute_prototypes: BTreeMap<u32, ClassPrototype>,
    pub class_svms: BTreeMap<String, BTreeMap<u32, LinearModel>>,
    pub attribute_svms: BTreeMap<u32, LinearModel>,
    pub attribute_classifiers: BTreeMap<String, Vec<AttributeClassifier>>,
    pub external_models: BTreeMap<PathBuf, LinearModel>,
}

fn one_vs_rest(
    rows: &[Vec<f64>],
    classes: &[u32],
    params: &TrainParams,
) -> Result<BTreeMap<u32, LinearModel>> {
    let distinct: BTreeSet<u32> = classes.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(
            "one-vs-rest class models need at least two train classes".into(),
        ));
    }
    distinct
        .into_iter()
        .map(|c| {
            let labels: Vec<bool> = classes.iter().map(|&k| k == c).collect();
            train_binary_svm(rows, &labels, params).map(|m| (c, m))
        })
        .collect()
}

/// Trains everything the configured indicators need, on `train`'s train split.
pub fn train_aux_models(train: &Dataset, config: &SuiteConfig, seed: u64) -> Result<AuxModels> {
    let params = TrainParams {
        lambda: config.aux_lambda,
        epochs: config.aux_epochs,
        seed,
        ..TrainParams::default()
    };
    let train_ids = train.ids_in(Split::Train);
    let mut aux = AuxModels::default();
    let needs_attr = config.indicators.iter().any(|c| {
        matches!(
            c.kind,
            IndicatorKind::I2cAtt | IndicatorKind::DapOracle | IndicatorKind::DapPredicted { .. }
        )
    });
    if needs_attr {
        aux.attribute_prototypes = build_attribute_prototypes(train);
    }
    for ind in &config.indicators {
        match &ind.kind {
            IndicatorKind::Cluster { feature } if !aux.prototypes.contains_key(feature) => {
                let (p, _) = build_prototypes(train, train.feature(feature)?)?;
                aux.prototypes.insert(feature.clone(), p);
            }
            IndicatorKind::ClassSvm { feature } if !aux.class_svms.contains_key(feature) => {
                let f = train.feature(feature)?;
                let (rows, classes): (Vec<Vec<f64>>, Vec<u32>) = train_ids
                    .iter()
                    .filter_map(|id| f.get(id).map(|r| (r.to_vec(), train.records[id].class_id)))
                    .unzip();
                aux.class_svms
                    .insert(feature.clone(), one_vs_rest(&rows, &classes, &params)?);
            }
            IndicatorKind::SvmAtt if aux.attribute_svms.is_empty() => {
                let (rows, classes): (Vec<Vec<f64>>, Vec<u32>) = train_ids
                    .iter()
                    .filter_map(|id| {
                        let r = &train.records[id];
                        r.attributes.as_ref().map(|a| (bools_to_f64(a), r.class_id))
                    })
                    .unzip();
                aux.attribute_svms = one_vs_rest(&rows, &classes, &params)?;
            }
            IndicatorKind::DapPredicted { feature }
                if !aux.attribute_classifiers.contains_key(feature) =>
            {
                let f = train.feature(feature)?;
                let (rows, attrs): (Vec<Vec<f64>>, Vec<&Vec<bool>>) = train_ids
                    .iter()
                    .filter_map(|id| {
                        let a = train.records[id].attributes.as_ref()?;
                        Some((f.get(id)?.to_vec(), a))
                    })
                    .unzip();
                if rows.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "no train image has both attributes and {feature} features"
                    )));
                }
                let classifiers = (0..train.constants.m)
                    .map(|m| {
                        let labels: Vec<bool> = attrs.iter().map(|a| a[m]).collect();
                        let pos = labels.iter().filter(|&&l| l).count();
                        if pos == 0 || pos == labels.len() {
                            Ok(AttributeClassifier::Constant(pos as f64 / labels.len() as f64))
                        } else {
                            train_binary_svm(&rows, &labels, &params).map(AttributeClassifier::Model)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                aux.attribute_classifiers.insert(feature.clone(), classifiers);
            }
            IndicatorKind::External {
                model: Some(path), ..
            } if !aux.external_models.contains_key(path) => {
                aux.external_models.insert(path.clone(), load_model(path)?);
            }
            _ => {}
        }
    }
    Ok(aux)
}

/// Outcome of a suite run: one score set per configured indicator, plus the
/// ids each indicator could not score and why.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteResult {
    pub scores: Vec<IndicatorScores>,
    pub missing: BTreeMap<String, Vec<(String, String)>>,
}

fn score_one(
    config: &IndicatorConfig,
    record: &ImageRecord,
    dataset: &Dataset,
    aux: &AuxModels,
    epsilon: f64,
) -> Result<f64> {
    let id = &record.image_id;
    let class = record.class_id;
    let feature_row = |feature: &str| -> Result<&[f64]> {
        dataset
            .feature(feature)?
            .get(id)
            .ok_or_else(|| Error::MissingFeatures(id.clone()))
    };
    let attrs = || record.attributes.as_ref().ok_or_else(|| missing(record, "attributes"));
    let attr_proto = || {
        aux.attribute_prototypes
            .get(&class)
            .ok_or_else(|| missing(record, "attribute prototype for class"))
    };
    match &config.kind {
        IndicatorKind::BbSize { source } => bb_size(record, *source),
        IndicatorKind::Dist2Center { source } => bb_dist2center(record, *source),
        IndicatorKind::Occlusion => occlusion_score(record),
        IndicatorKind::External {
            score: Some(name), ..
        } => external_score(record, name),
        IndicatorKind::External {
            model: Some(path),
            feature: Some(feature),
            ..
        } => {
            let model = aux
                .external_models
                .get(path)
                .ok_or_else(|| Error::invalid(format!("model {} not loaded", path.display())))?;
            Ok(model.score(feature_row(feature)?))
        }
        IndicatorKind::External { .. } => Err(Error::invalid(format!(
            "external indicator {} needs `score` or `model` + `feature`",
            config.name
        ))),
        IndicatorKind::Cluster { feature } => {
            let proto = aux
                .prototypes
                .get(feature)
                .and_then(|p| p.get(&class))
                .ok_or_else(|| missing(record, "class prototype"))?;
            Ok(cluster_score(feature_row(feature)?, proto))
        }
        IndicatorKind::ClassSvm { feature } => {
            let model = aux
                .class_svms
                .get(feature)
                .and_then(|m| m.get(&class))
                .ok_or_else(|| missing(record, "class model"))?;
            Ok(class_svm_score(feature_row(feature)?, model))
        }
        IndicatorKind::SvmAtt => {
            let model = aux
                .attribute_svms
                .get(&class)
                .ok_or_else(|| missing(record, "attribute class model"))?;
            Ok(class_svm_score(&bools_to_f64(attrs()?), model))
        }
        IndicatorKind::I2cAtt => i2c_att_score(attrs()?, attr_proto()?),
        IndicatorKind::DapOracle => dap_score(&bools_to_f64(attrs()?), attr_proto()?, epsilon),
        IndicatorKind::DapPredicted { feature } => {
            let classifiers = aux
                .attribute_classifiers
                .get(feature)
                .ok_or_else(|| Error::invalid(format!("no attribute classifiers for {feature}")))?;
            let x = feature_row(feature)?;
            let probs: Vec<f64> = classifiers.iter().map(|c| c.probability(x)).collect();
            dap_score(&probs, attr_proto()?, epsilon)
        }
    }
}

/// Scores `image_ids` with every configured indicator. Per-image failures
/// caused by missing annotations, features or prototypes are collected in
/// `missing`; configuration errors abort.
pub fn compute_indicator_suite(
    dataset: &Dataset,
    image_ids: &[String],
    aux: &AuxModels,
    config: &SuiteConfig,
) -> Result<SuiteResult> {
    let mut result = SuiteResult::default();
    for ind in &config.indicators {
        let mut scores = IndicatorScores::new(&ind.name, ind.provenance());
        let mut gaps = Vec::new();
        for id in image_ids {
            let record = dataset
                .records
                .get(id)
                .ok_or_else(|| Error::invalid(format!("unknown image {id}")))?;
            match score_one(ind, record, dataset, aux, config.dap_epsilon) {
                Ok(v) if v.is_finite() => {
                    scores.scores.insert(id.clone(), v);
                }
                Ok(_) => gaps.push((id.clone(), "non-finite score".to_string())),
                Err(e @ (Error::AnnotationMissing { .. } | Error::MissingFeatures(_) | Error::UnknownScore { .. })) => {
                    gaps.push((id.clone(), e.to_string()))
                }
                Err(e) => return Err(e),
            }
        }
        if !gaps.is_empty() {
            warn!("indicator {}: {} images could not be scored", ind.name, gaps.len());
            result.missing.insert(ind.name.clone(), gaps);
        }
        result.scores.push(scores);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BoundingBox, DetectedBox};
    use proptest::prelude::*;

    fn rec() -> ImageRecord {
        ImageRecord::new("img", 1, 100, 100)
    }

    fn with_box(x: f64, y: f64, w: f64, h: f64) -> ImageRecord {
        let mut r = rec();
        r.gt_box = Some(BoundingBox { x, y, w, h });
        r
    }

    fn proto(mu: Vec<f64>, attr_mean: Vec<f64>) -> ClassPrototype {
        ClassPrototype {
            class_id: 1,
            mu,
            attr_signature: Some(attr_mean.iter().map(|&v| v >= 0.5).collect()),
            attr_mean: Some(attr_mean),
        }
    }

    #[test]
    fn bb_size_examples() {
        assert_eq!(bb_size(&with_box(0.0, 0.0, 100.0, 100.0), BoxSource::Gt).unwrap(), 1.0);
        assert_eq!(bb_size(&with_box(10.0, 20.0, 50.0, 50.0), BoxSource::Gt).unwrap(), 0.25);
        assert!(matches!(
            bb_size(&rec(), BoxSource::Det),
            Err(Error::AnnotationMissing { .. })
        ));
    }

    #[test]
    fn det_box_is_used_for_det_source() {
        let mut r = rec();
        r.det_box = Some(DetectedBox {
            bbox: BoundingBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 },
            confidence: 0.3,
        });
        assert_eq!(bb_size(&r, BoxSource::Det).unwrap(), 0.01);
    }

    #[test]
    fn dist2center_examples() {
        assert_eq!(bb_dist2center(&with_box(25.0, 25.0, 50.0, 50.0), BoxSource::Gt).unwrap(), 0.0);
        let corner = bb_dist2center(&with_box(-5.0, -5.0, 10.0, 10.0), BoxSource::Gt).unwrap();
        assert!((corner + 0.5).abs() < 1e-12);
        let far = bb_dist2center(&with_box(95.0, 95.0, 10.0, 10.0), BoxSource::Gt).unwrap();
        assert!((far + 0.5).abs() < 1e-12);
    }

    #[test]
    fn occlusion_examples() {
        let mut r = rec();
        r.parts = Some(vec![true; 15]);
        assert_eq!(occlusion_score(&r).unwrap(), 15.0);
        r.parts = Some(vec![false; 15]);
        assert_eq!(occlusion_score(&r).unwrap(), 0.0);
        r.parts = Some((0..15).map(|i| i < 9).collect());
        assert_eq!(occlusion_score(&r).unwrap(), 9.0);
        r.parts = None;
        assert!(occlusion_score(&r).is_err());
    }

    #[test]
    fn external_examples() {
        let mut r = rec();
        r.external_scores.insert("aesthetic".into(), 0.7);
        assert_eq!(external_score(&r, "aesthetic").unwrap(), 0.7);
        let mut m = LinearModel::zeros(2, crate::solvers::Objective::Binary);
        m.w = vec![1.0, 0.0];
        assert_eq!(m.score(&[0.3, 9.0]), 0.3);
        match external_score(&r, "foo") {
            Err(Error::UnknownScore { available, .. }) => assert_eq!(available, vec!["aesthetic"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cluster_examples() {
        let p = proto(vec![1.0, 1.0], vec![]);
        assert_eq!(cluster_score(&[1.0, 1.0], &p), 0.0);
        assert_eq!(cluster_score(&[3.0, 1.0], &p), -4.0);
    }

    #[test]
    fn i2c_examples() {
        assert_eq!(i2c_att_score(&[true, false], &proto(vec![], vec![1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(i2c_att_score(&[true, false], &proto(vec![], vec![0.0, 0.0])).unwrap(), -1.0);
        let v = i2c_att_score(&[true, true], &proto(vec![], vec![0.0, 0.0])).unwrap();
        assert!((v + 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dap_examples() {
        let eps = 1e-5;
        let p = proto(vec![], vec![1.0, 1.0, 1.0]);
        let best = dap_score(&[1.0, 1.0, 1.0], &p, eps).unwrap();
        assert!((best - 3.0 * (1.0 - eps).ln()).abs() < 1e-15);
        let one_off = dap_score(&[1.0, 1.0, 0.0], &p, eps).unwrap();
        assert!((one_off - (2.0 * (1.0 - eps).ln() + eps.ln())).abs() < 1e-12);
        assert!(dap_score(&[1.0, 1.0], &p, eps).is_err());
        assert!(dap_score(&[1.0, 1.0, 1.0], &p, 0.5).is_err());
    }

    #[test]
    fn signature_ties_round_up() {
        let mut d = crate::synthetic::tiny_dataset();
        for (i, r) in d.records.values_mut().enumerate() {
            r.class_id = 1;
            r.attributes = Some(if i % 2 == 0 { vec![true, false] } else { vec![true, true] });
        }
        d.constants.m = 2;
        let keep: BTreeSet<String> = d.records.keys().take(2).cloned().collect();
        let mut d = d.restrict(&keep);
        d.splits.values_mut().for_each(|s| *s = Split::Train);
        let f = FeatureMatrix::from_rows(
            "f",
            2,
            keep.iter().zip([vec![0.0, 0.0], vec![2.0, 2.0]]).map(|(id, r)| (id.clone(), r)),
        )
        .unwrap();
        let (protos, _) = build_prototypes(&d, &f).unwrap();
        let p = &protos[&1];
        assert_eq!(p.mu, vec![1.0, 1.0]);
        assert_eq!(p.attr_mean.as_ref().unwrap(), &vec![1.0, 0.5]);
        assert_eq!(p.attr_signature.as_ref().unwrap(), &vec![true, true]);
    }

    proptest! {
        #[test]
        fn dap_exp_matches_product(probs in prop::collection::vec(0.0f64..=1.0, 1..=10),
                                   sig in prop::collection::vec(any::<bool>(), 10)) {
            let eps = 1e-5;
            let sig = &sig[..probs.len()];
            let p = ClassPrototype { class_id: 1, mu: vec![], attr_mean: None, attr_signature: Some(sig.to_vec()) };
            let mut product = 1.0;
            for (q, s) in probs.iter().zip(sig) {
                let q = if *s { *q } else { 1.0 - q };
                product *= q.max(eps).min(1.0 - eps);
            }
            let got = dap_score(&probs, &p, eps).unwrap().exp();
            prop_assert!((got - product).abs() <= 1e-12 * product.max(1.0));
        }

        #[test]
        fn dap_permutation_invariant(pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..12), rot in 0usize..12) {
            let eps = 1e-5;
            let (probs, sig): (Vec<f64>, Vec<bool>) = pairs.iter().cloned().unzip();
            let k = rot % probs.len();
            let mut probs2 = probs.clone();
            let mut sig2 = sig.clone();
            probs2.rotate_left(k);
            sig2.rotate_left(k);
            let mk = |s: Vec<bool>| ClassPrototype { class_id: 1, mu: vec![], attr_mean: None, attr_signature: Some(s) };
            let a = dap_score(&probs, &mk(sig), eps).unwrap();
            let b = dap_score(&probs2, &mk(sig2), eps).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn cluster_and_i2c_translation_invariant(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            mu in prop::collection::vec(-5.0f64..5.0, 3),
            shift in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = proto(mu.clone(), vec![]);
            let xs: Vec<f64> = x.iter().zip(&shift).map(|(a, s)| a + s).collect();
            let ms: Vec<f64> = mu.iter().zip(&shift).map(|(a, s)| a + s).collect();
            prop_assert!((cluster_score(&x, &p) - cluster_score(&xs, &proto(ms, vec![]))).abs() < 1e-9);
        }

        #[test]
        fn cluster_orders_by_distance(
            mu in prop::collection::vec(-3.0f64..3.0, 2),
            a in prop::collection::vec(-3.0f64..3.0, 2),
            b in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let p = proto(mu.clone(), vec![]);
            let dist = |x: &[f64]| ((x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2)).sqrt();
            if dist(&a) < dist(&b) {
                prop_assert!(cluster_score(&a, &p) >= cluster_score(&b, &p));
            }
        }

        #[test]
        fn larger_box_never_scores_lower(x in 0.0f64..50.0, y in 0.0f64..50.0, w in 1.0f64..50.0, h in 1.0f64..50.0, grow in 0.0f64..20.0) {
            let small = bb_size(&with_box(x, y, w, h), BoxSource::Gt).unwrap();
            let big = bb_size(&with_box(x, y, w + grow, h + grow), BoxSource::Gt).unwrap();
            prop_assert!(big >= small);
        }

        #[test]
        fn centering_never_scores_lower(cx in 0.0f64..100.0, cy in 0.0f64..100.0, t in 0.0f64..=1.0) {
            let place = |cx: f64, cy: f64| bb_dist2center(&with_box(cx - 1.0, cy - 1.0, 2.0, 2.0), BoxSource::Gt).unwrap();
            let before = place(cx, cy);
            let after = place(cx + t * (50.0 - cx), cy + t * (50.0 - cy));
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn more_visible_parts_never_scores_lower(parts in prop::collection::vec(any::<bool>(), 15), flip in 0usize..15) {
            let mut r = rec();
            r.parts = Some(parts.clone());
            let before = occlusion_score(&r).unwrap();
            let mut more = parts;
            more[flip] = true;
            r.parts = Some(more);
            prop_assert!(occlusion_score(&r).unwrap() >= before);
        }

        #[test]
        fn moving_toward_mu_never_scores_lower(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            mu in prop::collection::vec(-5.0f64..5.0, 3),
            t in 0.0f64..=1.0,
        ) {
            let p = proto(mu.clone(), vec![]);
            let closer: Vec<f64> = x.iter().zip(&mu).map(|(a, m)| a + t * (m - a)).collect();
            prop_assert!(cluster_score(&closer, &p) >= cluster_score(&x, &p) - 1e-12);
        }

        #[test]
        fn matching_signature_never_scores_lower(
            pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..12),
            flip in 0usize..12,
        ) {
            let (attrs, sig): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let mean: Vec<f64> = sig.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
            let p = proto(vec![], mean);
            let k = flip % attrs.len();
            let mut closer = attrs.clone();
            closer[k] = sig[k];
            let probs = |a: &[bool]| bools_to_f64(a);
            prop_assert!(dap_score(&probs(&closer), &p, 1e-5).unwrap() >= dap_score(&probs(&attrs), &p, 1e-5).unwrap());
            prop_assert!(i2c_att_score(&closer, &p).unwrap() >= i2c_att_score(&attrs, &p).unwrap());
        }
    }
}
