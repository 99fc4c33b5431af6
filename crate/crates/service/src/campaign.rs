//! Campaign configuration and the static batch assignment derived from it.

use std::collections::{BTreeMap, BTreeSet};

use iconika_core::datamodel::{AnnotationBatch, Dataset, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

fn default_batch_size() -> usize {
    5
}

fn default_classes_per_annotator() -> usize {
    50
}

fn default_shared_set_size() -> usize {
    50
}

fn default_shared_classes() -> usize {
    10
}

fn default_extension() -> String {
    "jpg".into()
}

/// Annotators who rate a common image set in addition to their own batches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyGroup {
    pub annotators: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Unique batches per annotator, one per distinct class.
    #[serde(default = "default_classes_per_annotator")]
    pub classes_per_annotator: usize,
    #[serde(default)]
    pub groups: Vec<RedundancyGroup>,
    #[serde(default = "default_shared_set_size")]
    pub shared_set_size: usize,
    /// Classes the shared set is drawn from.
    #[serde(default = "default_shared_classes")]
    pub shared_classes: usize,
    /// Annotators rating train-split images.
    #[serde(default)]
    pub train_annotators: Vec<String>,
    /// Annotators rating test-split images.
    #[serde(default)]
    pub test_annotators: Vec<String>,
    /// Per-annotator access tokens; annotators without one get a random token
    /// when the campaign is created.
    #[serde(default)]
    pub tokens: BTreeMap<String, String>,
    /// Required by the export endpoints when set.
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Image files are served as `/images/<image_id>.<extension>`.
    #[serde(default = "default_extension")]
    pub image_extension: String,
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn annotators(&self) -> impl Iterator<Item = (&String, Split)> {
        self.train_annotators
            .iter()
            .map(|a| (a, Split::Train))
            .chain(self.test_annotators.iter().map(|a| (a, Split::Test)))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        let train: BTreeSet<&String> = self.train_annotators.iter().collect();
        let test: BTreeSet<&String> = self.test_annotators.iter().collect();
        if train.len() != self.train_annotators.len() || test.len() != self.test_annotators.len() {
            return bad("an annotator is listed twice within a role".into());
        }
        if let Some(a) = train.intersection(&test).next() {
            return bad(format!("annotator {a} is in both the train and test campaign"));
        }
        let mut seen = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            if g.annotators.is_empty() {
                return bad(format!("redundancy group {i} is empty"));
            }
            let in_train = g.annotators.iter().all(|a| train.contains(a));
            let in_test = g.annotators.iter().all(|a| test.contains(a));
            if !in_train && !in_test {
                return bad(format!(
                    "redundancy group {i} must consist of registered annotators of a single role"
                ));
            }
            for a in &g.annotators {
                if !seen.insert(a) {
                    return bad(format!("annotator {a} belongs to more than one redundancy group"));
                }
            }
        }
        Ok(())
    }
}

/// Batches per annotator, in the order they are served.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub batches: BTreeMap<String, Vec<AnnotationBatch>>,
}

impl Assignment {
    pub fn all_batches(&self) -> impl Iterator<Item = &AnnotationBatch> {
        self.batches.values().flatten()
    }
}

fn pools(dataset: &Dataset, split: Split) -> BTreeMap<u32, Vec<String>> {
    let mut by_class: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for id in dataset.ids_in(split) {
        by_class.entry(dataset.records[&id].class_id).or_default().push(id);
    }
    by_class
}

/// Computes the whole assignment up front from the config's seed.
///
/// Each redundancy group first gets a shared set of `shared_set_size`
/// images spread over `shared_classes` classes, served to every member in
/// the same order. Every annotator then gets one batch from each of up to
/// `classes_per_annotator` distinct classes, drawn from images outside the
/// shared sets and cycling through each class pool so that images are spread
/// evenly across annotators.
pub fn assign(config: &CampaignConfig, dataset: &Dataset) -> Result<Assignment, ServiceError> {
    config.validate()?;
    let b = config.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out: BTreeMap<String, Vec<AnnotationBatch>> = BTreeMap::new();
    let roles: BTreeMap<&String, Split> = config.annotators().collect();

    let mut pool_by_split = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let mut p = pools(dataset, split);
        for ids in p.values_mut() {
            ids.shuffle(&mut rng);
        }
        pool_by_split.insert(split, p);
    }

    for (gi, group) in config.groups.iter().enumerate() {
        let split = roles[&group.annotators[0]];
        let pool = pool_by_split.get_mut(&split).expect("both splits present");
        let mut classes: Vec<u32> = pool
            .iter()
            .filter(|(_, ids)| ids.len() >= b)
            .map(|(c, _)| *c)
            .collect();
        classes.shuffle(&mut rng);
        classes.truncate(config.shared_classes.max(1));
        let per_class = config.shared_set_size.div_ceil(classes.len().max(1)).div_ceil(b) * b;
        let mut shared: Vec<(u32, Vec<String>)> = Vec::new();
        let mut remaining = config.shared_set_size.div_ceil(b) * b;
        for c in &classes {
            if remaining == 0 {
                break;
            }
            let ids = pool.get_mut(c).expect("class listed");
            let take = per_class.min(remaining).min(ids.len() / b * b);
            let chosen: Vec<String> = ids.drain(..take).collect();
            remaining -= take;
            for chunk in chosen.chunks(b) {
                shared.push((*c, chunk.to_vec()));
            }
        }
        if remaining > 0 {
            return Err(ServiceError::Config(format!(
                "redundancy group {gi}: not enough images for a shared set of {}",
                config.shared_set_size
            )));
        }
        for a in &group.annotators {
            let batches = out.entry(a.clone()).or_default();
            for (k, (c, ids)) in shared.iter().enumerate() {
                batches.push(AnnotationBatch {
                    batch_id: format!("{a}-s{k:03}"),
                    class_id: *c,
                    image_ids: ids.clone(),
                    assigned_annotator: a.clone(),
                });
            }
        }
    }

    // cursor per (split, class) so successive annotators get fresh images
    let mut cursors: BTreeMap<(Split, u32), usize> = BTreeMap::new();
    for (a, split) in config.annotators() {
        let pool = &pool_by_split[&split];
        let mut classes: Vec<u32> = pool
            .iter()
            .filter(|(_, ids)| ids.len() >= b)
            .map(|(c, _)| *c)
            .collect();
        classes.shuffle(&mut rng);
        classes.truncate(config.classes_per_annotator);
        classes.sort_unstable();
        let batches = out.entry(a.clone()).or_default();
        for (k, c) in classes.into_iter().enumerate() {
            let ids = &pool[&c];
            let cursor = cursors.entry((split, c)).or_insert(0);
            let image_ids: Vec<String> = (0..b).map(|i| ids[(*cursor + i) % ids.len()].clone()).collect();
            *cursor = (*cursor + b) % ids.len();
            batches.push(AnnotationBatch {
                batch_id: format!("{a}-u{k:03}"),
                class_id: c,
                image_ids,
                assigned_annotator: a.clone(),
            });
        }
    }
    Ok(Assignment { batches: out })
}
