//! Batch-based iconicity rating campaigns served over HTTP.

pub mod campaign;
pub mod http;
pub mod store;

pub use campaign::{assign, Assignment, CampaignConfig, RedundancyGroup};
pub use http::{router, serve, ServeOptions};
pub use store::{export_dataset, export_dir, Campaign, ExportSummary, NextBatch, Progress, SubmittedRating};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("campaign config: {0}")]
    Config(String),
    #[error("unknown annotator {0}; ask the campaign administrator to register this id")]
    UnknownAnnotator(String),
    #[error("missing or wrong token")]
    Forbidden,
    #[error("{0}")]
    Invalid(String),
    #[error("batch {0} was already submitted")]
    Duplicate(String),
    #[error("io: {0}")]
    Io(String),
}
