//! Domain types: instances, role-qualified workers, answers, datasets and
//! estimated answer sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("instance id must be non-empty")]
    EmptyInstanceId,
    #[error("worker id must be non-empty")]
    EmptyWorkerId,
    #[error("duplicate instance id {0:?}")]
    DuplicateInstance(String),
    #[error("unknown worker role {0:?} (expected CC, CA or LA)")]
    UnknownRole(String),
    #[error("malformed worker id {0:?} (expected <ROLE>:<local id>)")]
    MalformedWorkerId(String),
    #[error("answer of {worker} to instance {instance:?} is empty")]
    EmptyAnswer { instance: String, worker: String },
    #[error("worker {worker} answered instance {instance:?} more than once")]
    DuplicateAnswer { instance: String, worker: String },
    #[error("answer of {worker} references unknown instance {instance:?}")]
    DanglingInstance { instance: String, worker: String },
    #[error("instance {0:?} has no answers")]
    UncoveredInstance(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("answer partition check failed: {by_instance} by instance, {by_worker} by worker, {total} total")]
    Partition {
        by_instance: usize,
        by_worker: usize,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(String);

impl InstanceId {
    pub fn new(id: impl Into<String>) -> Result<Self, DataError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DataError::EmptyInstanceId);
        }
        Ok(InstanceId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The three kinds of workers. The declaration order (creators, crowd
/// aggregators, LLM aggregators) is the canonical role order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WorkerRole {
    #[serde(rename = "CC")]
    CrowdCreator,
    #[serde(rename = "CA")]
    CrowdAggregator,
    #[serde(rename = "LA")]
    LlmAggregator,
}

impl WorkerRole {
    pub const ALL: [WorkerRole; 3] = [
        WorkerRole::CrowdCreator,
        WorkerRole::CrowdAggregator,
        WorkerRole::LlmAggregator,
    ];

    /// Short wire code: `CC`, `CA` or `LA`.
    pub fn code(self) -> &'static str {
        match self {
            WorkerRole::CrowdCreator => "CC",
            WorkerRole::CrowdAggregator => "CA",
            WorkerRole::LlmAggregator => "LA",
        }
    }

    /// Dotted label used in report headers.
    pub fn label(self) -> &'static str {
        match self {
            WorkerRole::CrowdCreator => "C.C.",
            WorkerRole::CrowdAggregator => "C.A.",
            WorkerRole::LlmAggregator => "L.A.",
        }
    }
}

impl fmt::Display for WorkerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for WorkerRole {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CC" => Ok(WorkerRole::CrowdCreator),
            "CA" => Ok(WorkerRole::CrowdAggregator),
            "LA" => Ok(WorkerRole::LlmAggregator),
            other => Err(DataError::UnknownRole(other.to_string())),
        }
    }
}

/// A worker is identified by its role together with a local id, so one
/// person acting as creator and as aggregator is two workers.
///
/// Ordering is role first, then local id (lexicographic); this is the
/// canonical order used for tie-breaking throughout the crate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId {
    role: WorkerRole,
    local_id: String,
}

impl WorkerId {
    pub fn new(role: WorkerRole, local_id: impl Into<String>) -> Result<Self, DataError> {
        let local_id = local_id.into();
        if local_id.is_empty() {
            return Err(DataError::EmptyWorkerId);
        }
        Ok(WorkerId { role, local_id })
    }

    pub fn role(&self) -> WorkerRole {
        self.role
    }

    pub fn local_id(&self) -> &str {
        &self.local_id
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.role.code(), self.local_id)
    }
}

impl FromStr for WorkerId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, local) = s
            .split_once(':')
            .ok_or_else(|| DataError::MalformedWorkerId(s.to_string()))?;
        WorkerId::new(role.parse()?, local)
    }
}

impl Serialize for WorkerId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WorkerId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerRecord {
    pub instance: InstanceId,
    pub worker: WorkerId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: InstanceId,
    pub source: String,
    pub truth: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoleStats {
    pub workers: usize,
    pub answers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub instances: usize,
    pub workers: usize,
    pub answers: usize,
    pub per_role: BTreeMap<WorkerRole, RoleStats>,
}

impl DatasetStats {
    pub fn role(&self, role: WorkerRole) -> RoleStats {
        self.per_role.get(&role).copied().unwrap_or_default()
    }
}

/// An immutable, validated set of instances and answers.
///
/// Answers are held in canonical order: by instance id, then by worker id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: BTreeMap<InstanceId, Instance>,
    answers: Vec<AnswerRecord>,
    ranges: BTreeMap<InstanceId, Range<usize>>,
}

impl Dataset {
    /// Validates and normalizes (NFC, outer trim) every text field.
    pub fn new(instances: Vec<Instance>, answers: Vec<AnswerRecord>) -> Result<Self, DataError> {
        let mut by_id = BTreeMap::new();
        for mut inst in instances {
            inst.source = text::normalize(&inst.source);
            inst.truth = inst.truth.map(|t| text::normalize(&t));
            if by_id.contains_key(&inst.id) {
                return Err(DataError::DuplicateInstance(inst.id.0));
            }
            by_id.insert(inst.id.clone(), inst);
        }

        let mut answers: Vec<AnswerRecord> = answers
            .into_iter()
            .map(|mut a| {
                a.text = text::normalize(&a.text);
                a
            })
            .collect();
        for a in &answers {
            if !by_id.contains_key(&a.instance) {
                return Err(DataError::DanglingInstance {
                    instance: a.instance.0.clone(),
                    worker: a.worker.to_string(),
                });
            }
            if a.text.is_empty() {
                return Err(DataError::EmptyAnswer {
                    instance: a.instance.0.clone(),
                    worker: a.worker.to_string(),
                });
            }
        }
        answers.sort_by(|a, b| (&a.instance, &a.worker).cmp(&(&b.instance, &b.worker)));
        for pair in answers.windows(2) {
            if pair[0].instance == pair[1].instance && pair[0].worker == pair[1].worker {
                return Err(DataError::DuplicateAnswer {
                    instance: pair[0].instance.0.clone(),
                    worker: pair[0].worker.to_string(),
                });
            }
        }

        let mut ranges = BTreeMap::new();
        let mut start = 0;
        while start < answers.len() {
            let id = answers[start].instance.clone();
            let mut end = start;
            while end < answers.len() && answers[end].instance == id {
                end += 1;
            }
            ranges.insert(id, start..end);
            start = end;
        }
        if let Some(id) = by_id.keys().find(|id| !ranges.contains_key(*id)) {
            return Err(DataError::UncoveredInstance(id.0.clone()));
        }

        let dataset = Dataset {
            instances: by_id,
            answers,
            ranges,
        };
        dataset.check_partition()?;
        Ok(dataset)
    }

    pub fn from_json_str(json: &str) -> Result<Self, DataError> {
        let file: DatasetFile = serde_json::from_str(json)?;
        file.into_dataset()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&DatasetFile::from(self))
            .expect("dataset serialization is infallible");
        s.push('\n');
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json_string()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn instances(&self) -> impl ExactSizeIterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn instance_ids(&self) -> impl ExactSizeIterator<Item = &InstanceId> {
        self.instances.keys()
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    /// All answers in canonical order.
    pub fn answers(&self) -> &[AnswerRecord] {
        &self.answers
    }

    /// Index range of an instance's answers within [`Dataset::answers`].
    pub fn answer_range(&self, id: &InstanceId) -> Result<Range<usize>, DataError> {
        self.ranges
            .get(id)
            .cloned()
            .ok_or_else(|| DataError::UnknownInstance(id.0.clone()))
    }

    /// Answers to one instance, ordered by worker id.
    pub fn answers_of_instance(&self, id: &InstanceId) -> Result<&[AnswerRecord], DataError> {
        Ok(&self.answers[self.answer_range(id)?])
    }

    /// Answers of one worker ordered by instance id; empty for unknown workers.
    pub fn answers_of_worker(&self, worker: &WorkerId) -> Vec<&AnswerRecord> {
        self.answers.iter().filter(|a| &a.worker == worker).collect()
    }

    pub fn workers(&self) -> BTreeSet<&WorkerId> {
        self.answers.iter().map(|a| &a.worker).collect()
    }

    pub fn workers_with_role(&self, role: WorkerRole) -> Vec<WorkerId> {
        self.workers()
            .into_iter()
            .filter(|w| w.role() == role)
            .cloned()
            .collect()
    }

    pub fn has_role(&self, role: WorkerRole) -> bool {
        self.answers.iter().any(|a| a.worker.role() == role)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut per_role: BTreeMap<WorkerRole, RoleStats> = BTreeMap::new();
        let workers = self.workers();
        for w in &workers {
            per_role.entry(w.role()).or_default().workers += 1;
        }
        for a in &self.answers {
            per_role.entry(a.worker.role()).or_default().answers += 1;
        }
        DatasetStats {
            instances: self.instances.len(),
            workers: workers.len(),
            answers: self.answers.len(),
            per_role,
        }
    }

    /// Every distinct answer text and ground-truth text.
    pub fn texts(&self) -> BTreeSet<&str> {
        self.answers
            .iter()
            .map(|a| a.text.as_str())
            .chain(self.instances.values().filter_map(|i| i.truth.as_deref()))
            .collect()
    }

    /// Keeps the answers matching `keep`, over the same instance set.
    pub fn restrict(&self, keep: impl Fn(&AnswerRecord) -> bool) -> Result<Dataset, DataError> {
        Dataset::new(
            self.instances.values().cloned().collect(),
            self.answers.iter().filter(|a| keep(a)).cloned().collect(),
        )
    }

    /// Sum of per-instance answer counts and sum of per-worker answer counts
    /// must both equal the total.
    pub fn check_partition(&self) -> Result<(), DataError> {
        let by_instance: usize = self.ranges.values().map(|r| r.len()).sum();
        let mut per_worker: BTreeMap<&WorkerId, usize> = BTreeMap::new();
        for a in &self.answers {
            *per_worker.entry(&a.worker).or_default() += 1;
        }
        let by_worker: usize = per_worker.values().sum();
        let total = self.answers.len();
        if by_instance != total || by_worker != total {
            return Err(DataError::Partition {
                by_instance,
                by_worker,
                total,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Json,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DataError> {
    let raw = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dataset = match format {
        DatasetFormat::Json => Dataset::from_json_str(&raw)?,
    };
    let stats = dataset.stats();
    log::info!(
        "loaded {}: {} instances, {} workers, {} answers",
        path.display(),
        stats.instances,
        stats.workers,
        stats.answers
    );
    Ok(dataset)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    instances: Vec<InstanceRow>,
    answers: Vec<AnswerRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRow {
    id: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerRow {
    instance: String,
    worker: String,
    role: WorkerRole,
    text: String,
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset, DataError> {
        let instances = self
            .instances
            .into_iter()
            .map(|row| {
                Ok(Instance {
                    id: InstanceId::new(row.id)?,
                    source: row.source,
                    truth: row.truth,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let answers = self
            .answers
            .into_iter()
            .map(|row| {
                Ok(AnswerRecord {
                    instance: InstanceId::new(row.instance)?,
                    worker: WorkerId::new(row.role, row.worker)?,
                    text: row.text,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Dataset::new(instances, answers)
    }
}

impl From<&Dataset> for DatasetFile {
    fn from(d: &Dataset) -> Self {
        DatasetFile {
            instances: d
                .instances()
                .map(|i| InstanceRow {
                    id: i.id.0.clone(),
                    source: i.source.clone(),
                    truth: i.truth.clone(),
                })
                .collect(),
            answers: d
                .answers()
                .iter()
                .map(|a| AnswerRow {
                    instance: a.instance.0.clone(),
                    worker: a.worker.local_id().to_string(),
                    role: a.worker.role(),
                    text: a.text.clone(),
                })
                .collect(),
        }
    }
}

/// Where an estimated answer came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Worker(WorkerId),
    Synthetic(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Estimate {
    pub text: String,
    pub provenance: Provenance,
}

/// One estimated answer per instance.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EstimatedAnswers {
    entries: BTreeMap<InstanceId, Estimate>,
}

impl EstimatedAnswers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, instance: InstanceId, estimate: Estimate) {
        self.entries.insert(instance, estimate);
    }

    pub fn get(&self, instance: &InstanceId) -> Option<&Estimate> {
        self.entries.get(instance)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&InstanceId, &Estimate)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when there is exactly one entry per instance of `d`.
    pub fn covers_exactly(&self, d: &Dataset) -> bool {
        self.entries.len() == d.num_instances() && d.instance_ids().all(|id| self.entries.contains_key(id))
    }
}

impl FromIterator<(InstanceId, Estimate)> for EstimatedAnswers {
    fn from_iter<T: IntoIterator<Item = (InstanceId, Estimate)>>(iter: T) -> Self {
        EstimatedAnswers {
            entries: iter.into_iter().collect(),
        }
    }
}
