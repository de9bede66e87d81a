//! Aggregation of crowdsourced text answers from crowd creators, crowd
//! aggregators and LLM aggregators.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: instances, workers, answers and dataset ingestion.
//! * [`numerics`]: vector primitives and the chi-squared quantile.
//! * [`embedding`]: content-keyed embedding store and providers.
//! * [`aggregators`]: the extractive SMV, SMS and RASA aggregators.
//! * [`pipeline`]: resource merging, the selection × aggregator matrix and
//!   LLM-ensemble-size sweeps.
//! * [`llm`]: prompt rendering, response parsing and the cached LLM ensemble.
//! * [`metrics`]: GLEU, METEOR-lite, embedding similarity, worker quality and
//!   text inter-annotator agreement.
//! * [`synthgen`]: seeded synthetic crowds with known ground truth.

pub mod aggregators;
pub mod embedding;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthgen;
pub mod text;

pub use aggregators::{run_aggregator, AggregatorKind, AggregatorParams, RasaParams, ReliabilityState};
pub use embedding::{EmbeddingProvider, EmbeddingStore};
pub use model::{
    AnswerRecord, Dataset, Estimate, EstimatedAnswers, Instance, InstanceId, Provenance, WorkerId,
    WorkerRole,
};
pub use numerics::Vector;
pub use pipeline::{MergedAnswerSet, ResourceSelection};
