//! Feature-space training and evaluation for class-imbalanced cross-domain
//! out-of-distribution detection.
//!
//! The pipeline trains a small encoder and a unit-norm cosine classifier
//! over a labeled source domain and an unlabeled target domain, combining
//! four losses: source cross-entropy over class prototypes, memory-bank
//! neighborhood alignment, an entropy separation term driven by per-class
//! adaptive thresholds, and an uncertainty-weighted pairwise clustering
//! term. Evaluation reports OS* (mean per-class accuracy over known
//! classes), UNK (recall of unknown-class samples) and their harmonic mean
//! HOS.

pub mod alignment;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod plots;
pub mod prototypes;
pub mod rng;
pub mod thresholds;
pub mod trainer;
pub mod types;

pub use alignment::MemoryBank;
pub use clustering::ClusterSet;
pub use data::{SourceDataset, SynthConfig, TargetDataset};
pub use error::{Error, Result};
pub use eval::MetricsSummary;
pub use prototypes::PrototypeBank;
pub use thresholds::{TargetDecision, ThresholdTable, Verdict};
pub use trainer::{TrainConfig, TrainedState};
pub use types::{FeatureVector, ProbabilityVector};
