//! Desk-scale experiment harness: synthetic corpora, section-size
//! statistics, activation profiling, and campaign orchestration.
//!
//! ```text
//!   gen_corpus ──► corpus dir ──► train ──► DetectorModel
//!        │             │                        │
//!        │             ▼                        ▼
//!        │        corpus_stats           run_campaign ──► CampaignReport
//!        │      (section ratios)         (attacks x files,    │
//!        │                                audited rows)       ▼
//!        └────────────────────────────────────────────► activation
//!                                                        profiles
//! ```
//!
//! Everything here is deterministic under a fixed seed: corpus bytes,
//! trained weights, attack rows, and report JSON all reproduce exactly.

use thiserror::Error;

use crate::attack::AttackError;
use crate::malconv::ModelError;
use crate::pe::PeError;

mod activations;
mod campaign;
mod corpus;
mod stats;

pub use activations::{activation_csv, activation_report, GroupProfile, DEFAULT_PROFILE_BINS};
pub use campaign::{
    run_campaign, CampaignAttack, CampaignOptions, CampaignReport, CampaignRow, ConfigSummary,
    RowStatus, CAMPAIGN_SCHEMA_VERSION, REDUCTION_BUCKETS,
};
pub use corpus::{
    class_byte_range, gen_corpus, load_corpus, load_manifest, to_samples, CorpusFile, CorpusSpec,
    Label, ManifestEntry, SectionTemplate,
};
pub use stats::{
    bucket_of, corpus_stats, SectionRatioStats, SectionStats, RATIO_BUCKET_EDGES,
    RATIO_BUCKET_LABELS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("activation group {0:?} has no members")]
    EmptyGroup(String),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("corpus manifest problem: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pe(#[from] PeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}
