//! Temporal interest models for user response prediction.
//!
//! The crate implements a small family of behavior-sequence models built
//! around target attention and target-aware temporal encoding, together with
//! the machinery needed to study them end to end:
//!
//! * [`tensor`] — a dense f64 kernel with hand-derived backward passes and a
//!   finite-difference gradient checker,
//! * [`dataio`] — review-log ingestion, leave-one-out splitting with negative
//!   sampling, and a synthetic generator with a planted semantic-temporal
//!   pattern,
//! * [`encoding`] — embedding tables and the temporal encoders (relative
//!   position, binned time interval, chronological order),
//! * [`model`] — the model family selected by a TI/TA/TR component code,
//! * [`trainer`] — deterministic mini-batch training with Adam or Adagrad,
//! * [`metrics`] — Logloss, AUC, and group-wise AUC,
//! * [`analysis`] — ground-truth correlation via mutual information, learned
//!   correlation grids, and Pearson comparison.

pub mod analysis;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use analysis::{Aggregation, CorrelationGrid, GridKind, PearsonBin, PearsonReport};
pub use dataio::{Dataset, DatasetStats, Interaction, Sample, SynthConfig};
pub use encoding::{EmbeddingTable, EncoderKind, TemporalEncoder};
pub use error::{Error, Result};
pub use metrics::EvalRecord;
pub use model::{Model, ModelSpec, TimOutput, Variant};
pub use tensor::{Dense, GradCheckReport, Tape, VarId};
pub use trainer::{OptimizerKind, TrainConfig, TrainReport};
