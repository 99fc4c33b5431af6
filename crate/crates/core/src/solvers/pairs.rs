use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AnnotationBatch, RatingRecord};

/// An ordered training pair: `pos_id` was rated strictly higher than `neg_id`
/// by the same annotator within the same batch.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RankPair {
    pub pos_id: String,
    pub neg_id: String,
    pub annotator_id: String,
    pub batch_id: String,
}

/// Emits every strictly ordered within-batch pair, per annotator.
///
/// Output is grouped by `(batch_id, annotator_id)` and sorted by
/// `(pos_id, neg_id)` within a group. Ratings that name an unknown batch,
/// or an image outside their batch, are skipped.
pub fn build_pairs(ratings: &[RatingRecord], batches: &[AnnotationBatch]) -> Vec<RankPair> {
    let mut members: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for b in batches {
        members
            .entry(&b.batch_id)
            .or_default()
            .extend(b.image_ids.iter().map(String::as_str));
    }

    let mut groups: BTreeMap<(&str, &str), Vec<&RatingRecord>> = BTreeMap::new();
    let mut skipped = 0usize;
    for r in ratings {
        match members.get(r.batch_id.as_str()) {
            Some(set) if set.contains(r.image_id.as_str()) => groups
                .entry((&r.batch_id, &r.annotator_id))
                .or_default()
                .push(r),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("build_pairs: skipped {skipped} ratings outside known batches");
    }

    let mut out = Vec::new();
    for ((batch_id, annotator_id), group) in groups {
        let mut local = Vec::new();
        for p in &group {
            for n in &group {
                if p.rating > n.rating {
                    local.push(RankPair {
                        pos_id: p.image_id.clone(),
                        neg_id: n.image_id.clone(),
                        annotator_id: annotator_id.to_string(),
                        batch_id: batch_id.to_string(),
                    });
                }
            }
        }
        local.sort();
        out.extend(local);
    }
    out
}
