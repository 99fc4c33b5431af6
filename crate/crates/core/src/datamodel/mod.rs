//! Dataset schema, loading and validation, and deterministic splits.
//!
//! A dataset is described by a TOML manifest that names the dataset-level
//! constants (`k` classes, `p` parts, `m` attributes, `batch_size`) and the
//! files holding image metadata, split assignment, ratings, optional batch
//! definitions, optional external score tables and binary feature matrices.
//! Paths are resolved relative to the manifest. Record files are
//! line-delimited JSON.

mod features;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use features::{FeatureMatrix, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersects the box with `[0,width] x [0,height]`. Returns `None` when
    /// nothing of the box remains.
    pub fn clamped(&self, width: f64, height: f64) -> Option<BoundingBox> {
        if self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width && self.y + self.h <= height {
            return (self.w > 0.0 && self.h > 0.0).then_some(*self);
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        (x1 > x0 && y1 > y0).then_some(BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// A detector output: a box plus the detector's confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_id: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_box: Option<DetectedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external_scores: BTreeMap<String, f64>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, class_id: u32, width: u32, height: u32) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            class_id,
            width,
            height,
            gt_box: None,
            det_box: None,
            parts: None,
            attributes: None,
            external_scores: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub annotator_id: String,
    pub batch_id: String,
    pub image_id: String,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBatch {
    pub batch_id: String,
    pub class_id: u32,
    pub image_ids: Vec<String>,
    pub assigned_annotator: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub image_id: String,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConstants {
    /// Number of classes; class ids live in `1..=k`.
    pub k: u32,
    /// Length of every part-visibility vector.
    pub p: usize,
    /// Length of every attribute vector.
    pub m: usize,
    /// Images per annotation batch.
    #[serde(alias = "b")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub constants: DatasetConstants,
    pub metadata: PathBuf,
    pub splits: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<PathBuf>,
    /// Extra score tables, applied in order after inline scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub external_scores: Vec<PathBuf>,
    #[serde(default)]
    pub features: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
struct ExternalScoreLine {
    image_id: String,
    name: String,
    score: f64,
}

#[derive(Clone, Debug, Deserialize)]
struct RawRating {
    annotator_id: String,
    batch_id: String,
    image_id: String,
    rating: i64,
    timestamp: i64,
}

/// A validated, immutable dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub constants: DatasetConstants,
    pub records: BTreeMap<String, ImageRecord>,
    pub splits: BTreeMap<String, Split>,
    pub features: BTreeMap<String, FeatureMatrix>,
    /// Sorted by `(annotator_id, batch_id, image_id)`.
    pub ratings: Vec<RatingRecord>,
    /// Sorted by `(batch_id, assigned_annotator)`.
    pub batches: Vec<AnnotationBatch>,
}

impl Dataset {
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn feature(&self, name: &str) -> Result<&FeatureMatrix> {
        self.features.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown feature {name:?}; available: {:?}",
                self.features.keys().collect::<Vec<_>>()
            ))
        })
    }

    /// Ground-truth iconicity per image: the mean of all ratings it received.
    pub fn mean_ratings(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &self.ratings {
            let e = acc.entry(&r.image_id).or_default();
            e.0 += r.rating as f64;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(id, (s, n))| (id.to_string(), s / n as f64))
            .collect()
    }

    /// Keeps only the given images, together with their features, ratings
    /// and batch memberships. Batches that lose all images are dropped.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> Dataset {
        let records = self
            .records
            .iter()
            .filter(|(id, _)| keep.contains(*id))
            .map(|(id, r)| (id.clone(), r.clone()))
            .collect();
        let splits = self
            .splits
            .iter()
            .filter(|(id, _)| keep.contains(*id))
            .map(|(id, s)| (id.clone(), *s))
            .collect();
        let features = self
            .features
            .iter()
            .map(|(name, m)| {
                let rows = m
                    .rows
                    .iter()
                    .filter(|(id, _)| keep.contains(*id))
                    .map(|(id, r)| (id.clone(), r.clone()))
                    .collect();
                (
                    name.clone(),
                    FeatureMatrix {
                        feature_name: m.feature_name.clone(),
                        dim: m.dim,
                        rows,
                    },
                )
            })
            .collect();
        let ratings = self
            .ratings
            .iter()
            .filter(|r| keep.contains(&r.image_id))
            .cloned()
            .collect();
        let batches = self
            .batches
            .iter()
            .filter_map(|b| {
                let image_ids: Vec<String> = b
                    .image_ids
                    .iter()
                    .filter(|id| keep.contains(*id))
                    .cloned()
                    .collect();
                (!image_ids.is_empty()).then(|| AnnotationBatch {
                    image_ids,
                    ..b.clone()
                })
            })
            .collect();
        Dataset {
            constants: self.constants,
            records,
            splits,
            features,
            ratings,
            batches,
        }
    }

    /// The images of one split as a standalone dataset.
    pub fn split(&self, split: Split) -> Dataset {
        self.restrict(&self.ids_in(split).into_iter().collect())
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    load_dataset_with_warnings(manifest_path).map(|(d, _)| d)
}

/// Loads and validates a dataset, returning the non-fatal warnings
/// (clamped boxes, overridden external scores, irregular batches).
pub fn load_dataset_with_warnings(manifest_path: &Path) -> Result<(Dataset, Vec<String>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| base.join(p);
    let c = manifest.constants;
    if c.k == 0 || c.batch_size < 2 {
        return Err(Error::schema(
            manifest_path.display().to_string(),
            "k must be positive and batch_size at least 2",
        ));
    }
    let mut warnings = Vec::new();

    let meta_path = resolve(&manifest.metadata);
    let mut records = BTreeMap::new();
    for (line, rec) in read_jsonl::<ImageRecord>(&meta_path)? {
        let locator = format!("{}:{}", meta_path.display(), line);
        let rec = validate_record(rec, &c, &locator, &mut warnings)?;
        if records.contains_key(&rec.image_id) {
            return Err(Error::schema(
                locator,
                format!("duplicate image_id {}", rec.image_id),
            ));
        }
        records.insert(rec.image_id.clone(), rec);
    }

    for table in &manifest.external_scores {
        let path = resolve(table);
        for (line, s) in read_jsonl::<ExternalScoreLine>(&path)? {
            let locator = format!("{}:{}", path.display(), line);
            if !s.score.is_finite() {
                return Err(Error::schema(locator, "non-finite external score"));
            }
            let rec = records.get_mut(&s.image_id).ok_or_else(|| {
                Error::schema(&locator, format!("unknown image_id {}", s.image_id))
            })?;
            if rec
                .external_scores
                .insert(s.name.clone(), s.score)
                .is_some()
            {
                let msg = format!(
                    "{locator}: external score {:?} for {} overrides an earlier value",
                    s.name, s.image_id
                );
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let split_path = resolve(&manifest.splits);
    let mut splits = BTreeMap::new();
    for (line, e) in read_jsonl::<SplitEntry>(&split_path)? {
        let locator = format!("{}:{}", split_path.display(), line);
        if !records.contains_key(&e.image_id) {
            return Err(Error::schema(
                locator,
                format!("unknown image_id {}", e.image_id),
            ));
        }
        if splits.insert(e.image_id.clone(), e.split).is_some() {
            return Err(Error::schema(
                locator,
                format!("image {} assigned to more than one split", e.image_id),
            ));
        }
    }
    if let Some(missing) = records.keys().find(|id| !splits.contains_key(*id)) {
        return Err(Error::schema(
            split_path.display().to_string(),
            format!("image {missing} has no split assignment"),
        ));
    }

    let mut features = BTreeMap::new();
    for (name, rel) in &manifest.features {
        let m = FeatureMatrix::load(name, &resolve(rel))?;
        if let Some(unknown) = m.rows.keys().find(|id| !records.contains_key(*id)) {
            return Err(Error::schema(
                format!("{} image {}", resolve(rel).display(), unknown),
                "feature row for unknown image_id",
            ));
        }
        features.insert(name.clone(), m);
    }

    let mut ratings = Vec::new();
    if let Some(rel) = &manifest.ratings {
        let path = resolve(rel);
        let mut seen = BTreeSet::new();
        for (line, raw) in read_jsonl::<RawRating>(&path)? {
            let locator = format!("{}:{}", path.display(), line);
            let r = validate_rating(raw, &locator, &records)?;
            if !seen.insert((r.annotator_id.clone(), r.image_id.clone())) {
                return Err(Error::schema(
                    locator,
                    format!(
                        "annotator {} rated image {} twice",
                        r.annotator_id, r.image_id
                    ),
                ));
            }
            ratings.push(r);
        }
    }
    ratings.sort_by(|a, b| {
        (&a.annotator_id, &a.batch_id, &a.image_id).cmp(&(
            &b.annotator_id,
            &b.batch_id,
            &b.image_id,
        ))
    });

    let batches = match &manifest.batches {
        Some(rel) => {
            let path = resolve(rel);
            let mut batches = Vec::new();
            let mut ids = BTreeSet::new();
            for (line, b) in read_jsonl::<AnnotationBatch>(&path)? {
                let locator = format!("{}:{}", path.display(), line);
                validate_batch(&b, &c, &records, &locator)?;
                if !ids.insert(b.batch_id.clone()) {
                    return Err(Error::schema(
                        locator,
                        format!("duplicate batch_id {}", b.batch_id),
                    ));
                }
                batches.push(b);
            }
            if let Some(r) = ratings.iter().find(|r| !ids.contains(&r.batch_id)) {
                return Err(Error::schema(
                    format!("ratings annotator {} image {}", r.annotator_id, r.image_id),
                    format!("unknown batch_id {}", r.batch_id),
                ));
            }
            batches
        }
        None => derive_batches(&ratings, &records, &c, &mut warnings)?,
    };
    let mut batches = batches;
    batches.sort_by(|a, b| {
        (&a.batch_id, &a.assigned_annotator).cmp(&(&b.batch_id, &b.assigned_annotator))
    });

    Ok((
        Dataset {
            constants: c,
            records,
            splits,
            features,
            ratings,
            batches,
        },
        warnings,
    ))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::schema(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn validate_record(
    mut rec: ImageRecord,
    c: &DatasetConstants,
    locator: &str,
    warnings: &mut Vec<String>,
) -> Result<ImageRecord> {
    let loc = || format!("{locator} ({})", rec.image_id);
    if rec.image_id.is_empty() {
        return Err(Error::schema(locator, "empty image_id"));
    }
    if rec.width == 0 || rec.height == 0 {
        return Err(Error::schema(loc(), "width and height must be positive"));
    }
    if rec.class_id == 0 || rec.class_id > c.k {
        return Err(Error::schema(
            loc(),
            format!("class_id {} outside 1..={}", rec.class_id, c.k),
        ));
    }
    if let Some(parts) = &rec.parts {
        if parts.len() != c.p {
            return Err(Error::schema(
                loc(),
                format!("parts has {} entries, expected {}", parts.len(), c.p),
            ));
        }
    }
    if let Some(attrs) = &rec.attributes {
        if attrs.len() != c.m {
            return Err(Error::schema(
                loc(),
                format!("attributes has {} entries, expected {}", attrs.len(), c.m),
            ));
        }
    }
    for v in rec.external_scores.values() {
        if !v.is_finite() {
            return Err(Error::schema(loc(), "non-finite external score"));
        }
    }
    let (width, height) = (rec.width as f64, rec.height as f64);
    let mut clamp = |b: BoundingBox, which: &str| -> Result<BoundingBox> {
        if !(b.x.is_finite()
            && b.y.is_finite()
            && b.w > 0.0
            && b.h > 0.0
            && b.w.is_finite()
            && b.h.is_finite())
        {
            return Err(Error::schema(
                loc(),
                format!("{which} must have finite position and positive extent"),
            ));
        }
        let clamped = b
            .clamped(width, height)
            .ok_or_else(|| Error::schema(loc(), format!("{which} lies outside the image")))?;
        // rounding in x + w is not worth a warning
        let tol = 1e-9 * width.max(height);
        let moved = (clamped.x - b.x).abs() > tol
            || (clamped.y - b.y).abs() > tol
            || (clamped.x + clamped.w - b.x - b.w).abs() > tol
            || (clamped.y + clamped.h - b.y - b.h).abs() > tol;
        if !moved {
            return Ok(b);
        }
        let msg = format!("{}: {which} clamped to image bounds", loc());
        warn!("{msg}");
        warnings.push(msg);
        Ok(clamped)
    };
    if let Some(b) = rec.gt_box {
        rec.gt_box = Some(clamp(b, "gt_box")?);
    }
    if let Some(d) = rec.det_box {
        if !d.confidence.is_finite() {
            return Err(Error::schema(loc(), "non-finite detector confidence"));
        }
        rec.det_box = Some(DetectedBox {
            bbox: clamp(d.bbox, "det_box")?,
            confidence: d.confidence,
        });
    }
    Ok(rec)
}

fn validate_rating(
    raw: RawRating,
    locator: &str,
    records: &BTreeMap<String, ImageRecord>,
) -> Result<RatingRecord> {
    if !(0..=2).contains(&raw.rating) {
        return Err(Error::schema(
            locator,
            format!(
                "rating {} for image {} is not in {{0,1,2}}",
                raw.rating, raw.image_id
            ),
        ));
    }
    if !records.contains_key(&raw.image_id) {
        return Err(Error::schema(
            locator,
            format!("unknown image_id {}", raw.image_id),
        ));
    }
    Ok(RatingRecord {
        annotator_id: raw.annotator_id,
        batch_id: raw.batch_id,
        image_id: raw.image_id,
        rating: raw.rating as u8,
        timestamp: raw.timestamp,
    })
}

fn validate_batch(
    b: &AnnotationBatch,
    c: &DatasetConstants,
    records: &BTreeMap<String, ImageRecord>,
    locator: &str,
) -> Result<()> {
    if b.image_ids.len() != c.batch_size {
        return Err(Error::schema(
            locator,
            format!(
                "batch {} has {} images, expected {}",
                b.batch_id,
                b.image_ids.len(),
                c.batch_size
            ),
        ));
    }
    for id in &b.image_ids {
        let rec = records
            .get(id)
            .ok_or_else(|| Error::schema(locator, format!("unknown image_id {id}")))?;
        if rec.class_id != b.class_id {
            return Err(Error::schema(
                locator,
                format!(
                    "image {id} has class {} but batch {} is class {}",
                    rec.class_id, b.batch_id, b.class_id
                ),
            ));
        }
    }
    Ok(())
}

/// Reconstructs batches from the ratings log when no batch file is given:
/// one batch per `(annotator, batch_id)`, images in ascending id order.
fn derive_batches(
    ratings: &[RatingRecord],
    records: &BTreeMap<String, ImageRecord>,
    c: &DatasetConstants,
    warnings: &mut Vec<String>,
) -> Result<Vec<AnnotationBatch>> {
    let mut groups: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for r in ratings {
        groups
            .entry((&r.batch_id, &r.annotator_id))
            .or_default()
            .push(&r.image_id);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((batch_id, annotator), mut ids) in groups {
        ids.sort_unstable();
        let class_id = records[ids[0]].class_id;
        if let Some(odd) = ids.iter().find(|id| records[**id].class_id != class_id) {
            return Err(Error::schema(
                format!("ratings batch {batch_id} annotator {annotator}"),
                format!("image {odd} is not of class {class_id}"),
            ));
        }
        if ids.len() != c.batch_size {
            let msg = format!(
                "batch {batch_id} rated by {annotator} has {} images, expected {}",
                ids.len(),
                c.batch_size
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        out.push(AnnotationBatch {
            batch_id: batch_id.to_string(),
            class_id,
            image_ids: ids.into_iter().map(String::from).collect(),
            assigned_annotator: annotator.to_string(),
        });
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("records serialize"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the dataset as a manifest plus record and feature files under
/// `dir`, returning the manifest path. Reloading yields an equal dataset.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("metadata.jsonl"), dataset.records.values())?;
    write_jsonl(
        &dir.join("splits.jsonl"),
        dataset.splits.iter().map(|(id, s)| SplitEntry {
            image_id: id.clone(),
            split: *s,
        }),
    )?;
    write_jsonl(&dir.join("ratings.jsonl"), &dataset.ratings)?;
    write_jsonl(&dir.join("batches.jsonl"), &dataset.batches)?;
    let mut features = BTreeMap::new();
    for (name, m) in &dataset.features {
        let rel = PathBuf::from(format!("{name}.icfm"));
        m.save(&dir.join(&rel))?;
        features.insert(name.clone(), rel);
    }
    let manifest = DatasetManifest {
        constants: dataset.constants,
        metadata: "metadata.jsonl".into(),
        splits: "splits.jsonl".into(),
        ratings: Some("ratings.jsonl".into()),
        batches: Some("batches.jsonl".into()),
        external_scores: Vec::new(),
        features,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Halves of the train split used for validation-based model selection.
#[derive(Clone, Debug)]
pub struct HalfSplit {
    pub first: Dataset,
    pub second: Dataset,
    pub warnings: Vec<String>,
}

/// Partitions the train split into two class-stratified halves.
///
/// Within each class, ids are sorted, shuffled by a ChaCha generator seeded
/// with `seed` and the first `ceil(n/2)` go to the first half.
pub fn split_half(dataset: &Dataset, seed: u64) -> Result<HalfSplit> {
    let mut by_class: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for id in dataset.ids_in(Split::Train) {
        by_class
            .entry(dataset.records[&id].class_id)
            .or_default()
            .push(id);
    }
    if by_class.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = BTreeSet::new();
    let mut second = BTreeSet::new();
    let mut warnings = Vec::new();
    for (class_id, mut ids) in by_class {
        ids.sort();
        if ids.len() < 2 {
            let msg =
                format!("class {class_id} has a single train image; it goes to the first half");
            warn!("{msg}");
            warnings.push(msg);
        }
        ids.shuffle(&mut rng);
        let cut = ids.len().div_ceil(2);
        first.extend(ids[..cut].iter().cloned());
        second.extend(ids[cut..].iter().cloned());
    }
    Ok(HalfSplit {
        first: dataset.restrict(&first),
        second: dataset.restrict(&second),
        warnings,
    })
}
