//! Retrieval-guided contrastive learning for hateful meme detection over
//! precomputed image and text features.
//!
//! The pipeline: load [`EmbeddingDataset`]s, train a [`Model`] with
//! [`trainer::train`], then score a test set with the logistic head
//! ([`eval::evaluate_logistic`]) or by nearest-neighbour voting over an
//! encoded retrieval set ([`eval::evaluate_knn`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod neural;
pub mod retrieval;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{load_config, ClipMode, LossKind, RetrievalMode, RunConfig, SimMetric};
pub use data::{load_dataset, save_dataset, EmbeddingDataset, EmbeddingRecord, Label, SynthSpec};
pub use encoder::{ClassifierHead, Model, VlEncoderParams};
pub use error::{Error, ErrorClass, Result};
pub use eval::Metrics;
pub use neural::{Mode, ParamSet, TrainRng};
pub use retrieval::{DenseIndex, LabelFilter, Neighbor, SparseIndex};
pub use trainer::{train, EpochReport, TrainOutcome, TrainState};
