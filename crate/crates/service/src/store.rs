//! Campaign state: the immutable assignment plus the append-only ratings log.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use iconika_core::datamodel::{save_dataset, AnnotationBatch, Dataset, RatingRecord};
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::campaign::{Assignment, CampaignConfig};
use crate::ServiceError;

pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const BATCHES_FILE: &str = "batches.jsonl";
pub const CONFIG_FILE: &str = "campaign.json";

/// Counts per rating value, as reported alongside an export.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub records: usize,
    pub batches: usize,
    pub rating_0: usize,
    pub rating_1: usize,
    pub rating_2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator: String,
    pub rated_batches: usize,
    pub total_batches: usize,
}

/// What `next_batch` hands out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextBatch {
    Batch {
        batch: AnnotationBatch,
        position: usize,
        total: usize,
    },
    Done {
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedRating {
    pub image_id: String,
    pub rating: i64,
}

struct Slot {
    batch: AnnotationBatch,
    rated: AtomicBool,
}

struct Log {
    file: File,
    path: PathBuf,
}

/// A running campaign rooted in a state directory.
///
/// `next_batch` and `progress` only read the assignment and per-batch
/// atomic flags. `submit` serialises on the log mutex and acknowledges after
/// the appended lines are synced to disk.
pub struct Campaign {
    config: CampaignConfig,
    slots: BTreeMap<String, Vec<Slot>>,
    index: HashMap<String, (String, usize)>,
    log: Mutex<Log>,
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    config: CampaignConfig,
}

fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn random_token() -> String {
    let mut rng = rand::rng();
    (0..16).map(|_| format!("{:02x}", rng.random::<u8>())).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Io(format!("{}: {e}", path.display()))
}

impl Campaign {
    /// Writes the assignment table and config into `dir` (which must not
    /// already hold a campaign) and opens the campaign.
    pub fn create(dir: &Path, mut config: CampaignConfig, assignment: &Assignment) -> Result<Self, ServiceError> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            return Err(ServiceError::Config(format!(
                "{} already holds a campaign",
                dir.display()
            )));
        }
        let annotators: Vec<String> = config.annotators().map(|(a, _)| a.clone()).collect();
        for a in annotators {
            config.tokens.entry(a).or_insert_with(random_token);
        }
        let mut text = String::new();
        for b in assignment.all_batches() {
            text.push_str(&serde_json::to_string(b).expect("batch serializes"));
            text.push('\n');
        }
        let batches_path = dir.join(BATCHES_FILE);
        fs::write(&batches_path, text).map_err(|e| io_err(&batches_path, e))?;
        let stored = serde_json::to_string_pretty(&StoredConfig { config }).expect("config serializes");
        fs::write(&cfg_path, stored).map_err(|e| io_err(&cfg_path, e))?;
        Self::open(dir)
    }

    /// Opens an existing campaign, replaying its ratings log.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
        let StoredConfig { config } =
            serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", cfg_path.display())))?;

        let batches_path = dir.join(BATCHES_FILE);
        let f = File::open(&batches_path).map_err(|e| io_err(&batches_path, e))?;
        let mut slots: BTreeMap<String, Vec<Slot>> = BTreeMap::new();
        let mut index = HashMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io_err(&batches_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let batch: AnnotationBatch = serde_json::from_str(&line).map_err(|e| {
                ServiceError::Config(format!("{}:{}: {e}", batches_path.display(), n + 1))
            })?;
            let list = slots.entry(batch.assigned_annotator.clone()).or_default();
            index.insert(batch.batch_id.clone(), (batch.assigned_annotator.clone(), list.len()));
            list.push(Slot {
                batch,
                rated: AtomicBool::new(false),
            });
        }

        let log_path = dir.join(RATINGS_FILE);
        let mut replayed = 0usize;
        if log_path.exists() {
            let f = File::open(&log_path).map_err(|e| io_err(&log_path, e))?;
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| io_err(&log_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: RatingRecord = serde_json::from_str(&line).map_err(|e| {
                    ServiceError::Io(format!("{}:{}: corrupt record: {e}", log_path.display(), n + 1))
                })?;
                *counts.entry(r.batch_id).or_default() += 1;
                replayed += 1;
            }
            for (batch_id, count) in counts {
                match index.get(&batch_id) {
                    Some((a, i)) => {
                        let slot = &slots[a][*i];
                        if count != slot.batch.image_ids.len() {
                            warn!("batch {batch_id} has {count} logged records");
                        }
                        slot.rated.store(true, Ordering::SeqCst);
                    }
                    None => warn!("log names unknown batch {batch_id}"),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        info!("campaign at {} opened; {replayed} logged ratings replayed", dir.display());
        Ok(Campaign {
            config,
            slots,
            index,
            log: Mutex::new(Log { file, path: log_path }),
            dir: dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn token(&self, annotator: &str) -> Option<&str> {
        self.config.tokens.get(annotator).map(String::as_str)
    }

    fn slots_of(&self, annotator: &str) -> Result<&[Slot], ServiceError> {
        self.slots
            .get(annotator)
            .map(Vec::as_slice)
            .ok_or_else(|| ServiceError::UnknownAnnotator(annotator.to_string()))
    }

    pub fn check_token(&self, annotator: &str, token: Option<&str>) -> Result<(), ServiceError> {
        self.slots_of(annotator)?;
        match (self.token(annotator), token) {
            (Some(expected), Some(given)) if expected == given => Ok(()),
            (None, _) => Ok(()),
            _ => Err(ServiceError::Forbidden),
        }
    }

    /// First batch of the annotator not yet rated, shared batches first.
    pub fn next_batch(&self, annotator: &str) -> Result<NextBatch, ServiceError> {
        let slots = self.slots_of(annotator)?;
        let total = slots.len();
        Ok(slots
            .iter()
            .enumerate()
            .find(|(_, s)| !s.rated.load(Ordering::SeqCst))
            .map(|(position, s)| NextBatch::Batch {
                batch: s.batch.clone(),
                position,
                total,
            })
            .unwrap_or(NextBatch::Done { total }))
    }

    pub fn progress(&self, annotator: &str) -> Result<Progress, ServiceError> {
        let slots = self.slots_of(annotator)?;
        Ok(Progress {
            annotator: annotator.to_string(),
            rated_batches: slots.iter().filter(|s| s.rated.load(Ordering::SeqCst)).count(),
            total_batches: slots.len(),
        })
    }

    /// Validates and durably appends one batch of ratings. Nothing is written
    /// unless the whole submission is valid and the batch is still unrated.
    pub fn submit(
        &self,
        annotator: &str,
        batch_id: &str,
        ratings: &[SubmittedRating],
    ) -> Result<usize, ServiceError> {
        let slots = self.slots_of(annotator)?;
        let slot = match self.index.get(batch_id) {
            Some((owner, i)) if owner == annotator => &slots[*i],
            _ => {
                return Err(ServiceError::Invalid(format!(
                    "batch {batch_id} is not assigned to {annotator}"
                )))
            }
        };
        let expected: BTreeSet<&str> = slot.batch.image_ids.iter().map(String::as_str).collect();
        if ratings.len() != expected.len() {
            return Err(ServiceError::Invalid(format!(
                "batch {batch_id} needs {} ratings, got {}",
                expected.len(),
                ratings.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in ratings {
            if !(0..=2).contains(&r.rating) {
                return Err(ServiceError::Invalid(format!(
                    "rating {} for image {} is not in {{0,1,2}}",
                    r.rating, r.image_id
                )));
            }
            if !expected.contains(r.image_id.as_str()) {
                return Err(ServiceError::Invalid(format!(
                    "image {} is not part of batch {batch_id}",
                    r.image_id
                )));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(ServiceError::Invalid(format!("image {} rated twice", r.image_id)));
            }
        }

        let timestamp = now();
        let mut text = String::new();
        for r in ratings {
            let rec = RatingRecord {
                annotator_id: annotator.to_string(),
                batch_id: batch_id.to_string(),
                image_id: r.image_id.clone(),
                rating: r.rating as u8,
                timestamp,
            };
            text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            text.push('\n');
        }

        let mut log = self.log.lock().unwrap_or_else(|p| p.into_inner());
        if slot.rated.load(Ordering::SeqCst) {
            return Err(ServiceError::Duplicate(batch_id.to_string()));
        }
        let path = log.path.clone();
        log.file
            .write_all(text.as_bytes())
            .and_then(|_| log.file.flush())
            .and_then(|_| log.file.sync_data())
            .map_err(|e| io_err(&path, e))?;
        slot.rated.store(true, Ordering::SeqCst);
        Ok(ratings.len())
    }

    /// The ratings log as written, in the line format the dataset loader reads.
    pub fn export(&self) -> Result<(String, ExportSummary), ServiceError> {
        let _guard = self.log.lock().unwrap_or_else(|p| p.into_inner());
        export_dir(&self.dir)
    }
}

/// Reads a campaign directory's ratings log without opening the campaign.
pub fn export_dir(dir: &Path) -> Result<(String, ExportSummary), ServiceError> {
    let path = dir.join(RATINGS_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(&path, e)),
    };
    let mut summary = ExportSummary::default();
    let mut batches = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: RatingRecord = serde_json::from_str(line)
            .map_err(|e| ServiceError::Io(format!("{}: corrupt record: {e}", path.display())))?;
        summary.records += 1;
        match r.rating {
            0 => summary.rating_0 += 1,
            1 => summary.rating_1 += 1,
            _ => summary.rating_2 += 1,
        }
        batches.insert((r.annotator_id, r.batch_id));
    }
    summary.batches = batches.len();
    Ok((text, summary))
}

/// Writes `base` with its ratings and batches replaced by the campaign's log
/// and assignment table, as a dataset directory under `out`. Returns the
/// manifest path.
pub fn export_dataset(campaign_dir: &Path, base: &Dataset, out: &Path) -> Result<PathBuf, ServiceError> {
    let (text, _) = export_dir(campaign_dir)?;
    let mut ratings = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        ratings.push(serde_json::from_str::<RatingRecord>(line).map_err(|e| ServiceError::Io(e.to_string()))?);
    }
    let batches_path = campaign_dir.join(BATCHES_FILE);
    let batches_text = fs::read_to_string(&batches_path).map_err(|e| io_err(&batches_path, e))?;
    let mut batches = Vec::new();
    for line in batches_text.lines().filter(|l| !l.trim().is_empty()) {
        batches.push(serde_json::from_str::<AnnotationBatch>(line).map_err(|e| ServiceError::Io(e.to_string()))?);
    }
    let mut dataset = base.clone();
    dataset.ratings = ratings;
    dataset.batches = batches;
    save_dataset(&dataset, out).map_err(|e| ServiceError::Io(e.to_string()))
}
