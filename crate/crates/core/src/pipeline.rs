//! Resource merging and the selection × aggregator result matrix.
//!
//! Answer sets from the three worker roles are merged with "+" semantics:
//! workers are role-qualified, so nothing collapses across roles, and the
//! merged worker and answer counts are the sums of the included roles.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::aggregators::{run_aggregator, AggregateError, AggregatorKind, AggregatorParams};
use crate::embedding::EmbeddingStore;
use crate::model::{DataError, Dataset, EstimatedAnswers, WorkerId, WorkerRole};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("resource selection is empty")]
    EmptySelection,
    #[error("no dataset parts were supplied")]
    NoParts,
    #[error("dataset parts disagree on instance {0:?}")]
    InstanceMismatch(String),
    #[error("malformed selection {0:?} (expected e.g. CC, CA+LA, CC+CA+LA)")]
    MalformedSelection(String),
    #[error("no embedding for text {0:?}; build the store for all roles first")]
    MissingEmbedding(String),
    #[error("L.A. subset of size {requested} requested but only {available} L.A. workers exist")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("L.A. count must be positive")]
    ZeroSubset,
    #[error("L.A. worker {0} is not present in the data")]
    UnknownLaWorker(String),
    #[error("merging failed: {0}")]
    Data(#[from] DataError),
    #[error("cell {selection} × {kind} failed: {source}")]
    Cell {
        selection: String,
        kind: AggregatorKind,
        #[source]
        source: AggregateError,
    },
}

/// Which roles' answers feed a model aggregator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResourceSelection {
    pub use_cc: bool,
    pub use_ca: bool,
    pub use_la: bool,
    /// Restricts L.A. answers to these workers; only meaningful with `use_la`.
    pub la_subset: Option<Vec<WorkerId>>,
}

/// Row grouping used by the aggregation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    I,
    II,
    III,
    IV,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::I => "I",
            Group::II => "II",
            Group::III => "III",
            Group::IV => "IV",
        })
    }
}

impl ResourceSelection {
    pub fn new(use_cc: bool, use_ca: bool, use_la: bool) -> Self {
        ResourceSelection {
            use_cc,
            use_ca,
            use_la,
            la_subset: None,
        }
    }

    pub fn with_la_subset(mut self, subset: Vec<WorkerId>) -> Self {
        self.la_subset = Some(subset);
        self
    }

    pub fn includes(&self, role: WorkerRole) -> bool {
        match role {
            WorkerRole::CrowdCreator => self.use_cc,
            WorkerRole::CrowdAggregator => self.use_ca,
            WorkerRole::LlmAggregator => self.use_la,
        }
    }

    pub fn roles(&self) -> Vec<WorkerRole> {
        WorkerRole::ALL.into_iter().filter(|r| self.includes(*r)).collect()
    }

    pub fn is_empty(&self) -> bool {
        !(self.use_cc || self.use_ca || self.use_la)
    }

    /// `CC`, `CA+LA`, ... in canonical role order; the L.A. subset is not
    /// part of the label.
    pub fn label(&self) -> String {
        self.roles().iter().map(|r| r.code()).collect::<Vec<_>>().join("+")
    }

    pub fn group(&self) -> Group {
        match (self.use_cc, self.use_ca, self.use_la) {
            (true, false, false) => Group::I,
            (false, true, false) | (false, false, true) => Group::II,
            (true, true, false) => Group::III,
            _ => Group::IV,
        }
    }

    fn admits(&self, worker: &WorkerId) -> bool {
        if !self.includes(worker.role()) {
            return false;
        }
        match (&self.la_subset, worker.role()) {
            (Some(subset), WorkerRole::LlmAggregator) => subset.contains(worker),
            _ => true,
        }
    }
}

impl fmt::Display for ResourceSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ResourceSelection {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut sel = ResourceSelection::new(false, false, false);
        for part in s.split('+') {
            let role: WorkerRole = part
                .trim()
                .parse()
                .map_err(|_| PipelineError::MalformedSelection(s.to_string()))?;
            let flag = match role {
                WorkerRole::CrowdCreator => &mut sel.use_cc,
                WorkerRole::CrowdAggregator => &mut sel.use_ca,
                WorkerRole::LlmAggregator => &mut sel.use_la,
            };
            if *flag {
                return Err(PipelineError::MalformedSelection(s.to_string()));
            }
            *flag = true;
        }
        Ok(sel)
    }
}

impl Serialize for ResourceSelection {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResourceSelection {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// The seven answer-resource rows: CC | CA | LA | CC+CA | CC+LA | CA+LA | CC+CA+LA.
pub fn default_selections() -> Vec<ResourceSelection> {
    vec![
        ResourceSelection::new(true, false, false),
        ResourceSelection::new(false, true, false),
        ResourceSelection::new(false, false, true),
        ResourceSelection::new(true, true, false),
        ResourceSelection::new(true, false, true),
        ResourceSelection::new(false, true, true),
        ResourceSelection::new(true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedAnswerSet {
    pub selection: ResourceSelection,
    pub dataset: Dataset,
}

impl MergedAnswerSet {
    pub fn worker_count(&self) -> usize {
        self.dataset.workers().len()
    }

    pub fn answer_count(&self) -> usize {
        self.dataset.answers().len()
    }
}

/// Merges the answers of the selected roles from `parts`.
///
/// Parts may each hold one or several roles but must share one instance set;
/// instance metadata comes from the first part; missing truth is filled from later parts.
pub fn merge_resources(parts: &[Dataset], sel: &ResourceSelection) -> Result<MergedAnswerSet, PipelineError> {
    if sel.is_empty() {
        return Err(PipelineError::EmptySelection);
    }
    let first = parts.first().ok_or(PipelineError::NoParts)?;
    let ids: BTreeSet<_> = first.instance_ids().collect();
    for part in &parts[1..] {
        let other: BTreeSet<_> = part.instance_ids().collect();
        if let Some(id) = ids.symmetric_difference(&other).next() {
            return Err(PipelineError::InstanceMismatch(id.to_string()));
        }
    }
    let instances = first
        .instances()
        .map(|inst| {
            let mut inst = inst.clone();
            if inst.truth.is_none() {
                inst.truth = parts
                    .iter()
                    .find_map(|p| p.instance(&inst.id).and_then(|i| i.truth.clone()));
            }
            inst
        })
        .collect();
    let answers = parts
        .iter()
        .flat_map(|p| p.answers())
        .filter(|a| sel.admits(&a.worker))
        .cloned()
        .collect();
    Ok(MergedAnswerSet {
        selection: sel.clone(),
        dataset: Dataset::new(instances, answers)?,
    })
}

/// One aggregation result.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub selection: ResourceSelection,
    pub kind: AggregatorKind,
    pub answers: EstimatedAnswers,
}

/// Runs every (selection, kind) pair, returned in selection-major order.
///
/// The store must already cover every text of every merged set; the first
/// uncovered text aborts the run before any aggregation starts.
pub fn run_matrix(
    parts: &[Dataset],
    store: &EmbeddingStore,
    selections: &[ResourceSelection],
    kinds: &[AggregatorKind],
    params: &AggregatorParams,
) -> Result<Vec<Cell>, PipelineError> {
    let merged = selections
        .iter()
        .map(|sel| merge_resources(parts, sel))
        .collect::<Result<Vec<_>, _>>()?;
    for m in &merged {
        if let Some(text) = m.dataset.answers().iter().map(|a| a.text.as_str()).find(|t| !store.contains(t)) {
            return Err(PipelineError::MissingEmbedding(text.to_string()));
        }
    }
    let jobs: Vec<(&MergedAnswerSet, AggregatorKind)> = merged
        .iter()
        .flat_map(|m| kinds.iter().map(move |k| (m, *k)))
        .collect();
    jobs.par_iter()
        .map(|(m, kind)| {
            let answers = run_aggregator(*kind, &m.dataset, store, params).map_err(|source| PipelineError::Cell {
                selection: m.selection.label(),
                kind: *kind,
                source,
            })?;
            Ok(Cell {
                selection: m.selection.clone(),
                kind: *kind,
                answers,
            })
        })
        .collect()
}

/// Nested temperature lists for ensembles of 1, 3, 5, 7 and 9 LLM aggregators.
pub const TEMPERATURE_NESTING: [(usize, &[f64]); 5] = [
    (1, &[0.0]),
    (3, &[0.0, 0.5, 1.0]),
    (5, &[0.0, 0.25, 0.5, 0.75, 1.0]),
    (7, &[0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]),
    (9, &[0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0, 1.1, 1.25]),
];

/// Worker id of the LLM aggregator run at `temperature`: `LA:t=<value>`.
pub fn la_worker_id(temperature: f64) -> WorkerId {
    WorkerId::new(WorkerRole::LlmAggregator, format!("t={temperature}")).expect("non-empty")
}

/// Temperature encoded in an `LA:t=<value>` worker id.
pub fn la_temperature(worker: &WorkerId) -> Option<f64> {
    worker.local_id().strip_prefix("t=")?.parse().ok()
}

/// The L.A. workers used for an ensemble of `count`.
///
/// Uses the nested temperature list for `count` when all of its workers are
/// present; otherwise the first `count` workers ordered by temperature (then
/// canonical order for workers without one).
pub fn la_subset(available: &[WorkerId], count: usize) -> Result<Vec<WorkerId>, PipelineError> {
    if count == 0 {
        return Err(PipelineError::ZeroSubset);
    }
    if count > available.len() {
        return Err(PipelineError::SubsetTooLarge {
            requested: count,
            available: available.len(),
        });
    }
    if let Some((_, temps)) = TEMPERATURE_NESTING.iter().find(|(n, _)| *n == count) {
        let nested: Vec<WorkerId> = temps.iter().map(|&t| la_worker_id(t)).collect();
        if nested.iter().all(|w| available.contains(w)) {
            return Ok(nested);
        }
    }
    let mut ordered = available.to_vec();
    ordered.sort_by(|a, b| match (la_temperature(a), la_temperature(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(b),
    });
    ordered.truncate(count);
    Ok(ordered)
}

/// One ensemble size of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub la_count: usize,
    pub la_workers: Vec<WorkerId>,
    pub cells: Vec<Cell>,
}

/// Runs the matrix once per L.A. ensemble size over the selections that
/// include L.A. answers. `explicit` overrides the subset for a count.
pub fn run_sweep(
    parts: &[Dataset],
    store: &EmbeddingStore,
    la_counts: &[usize],
    explicit: &dyn Fn(usize) -> Option<Vec<WorkerId>>,
    kinds: &[AggregatorKind],
    params: &AggregatorParams,
) -> Result<Vec<SweepRun>, PipelineError> {
    let available: Vec<WorkerId> = parts
        .iter()
        .flat_map(|p| p.workers_with_role(WorkerRole::LlmAggregator))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    la_counts
        .iter()
        .map(|&count| {
            let subset = match explicit(count) {
                Some(s) => {
                    if let Some(w) = s.iter().find(|w| !available.contains(w)) {
                        return Err(PipelineError::UnknownLaWorker(w.to_string()));
                    }
                    s
                }
                None => la_subset(&available, count)?,
            };
            let selections: Vec<ResourceSelection> = default_selections()
                .into_iter()
                .filter(|s| s.use_la)
                .map(|s| s.with_la_subset(subset.clone()))
                .collect();
            let cells = run_matrix(parts, store, &selections, kinds, params)?;
            Ok(SweepRun {
                la_count: count,
                la_workers: subset,
                cells,
            })
        })
        .collect()
}
