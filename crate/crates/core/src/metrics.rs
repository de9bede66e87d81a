//! Answer-quality metrics.
//!
//! * GLEU: pooled 1–4-gram clipped matches `m`, hypothesis n-gram total `h`,
//!   reference n-gram total `r`; score `min(m/h, m/r)`.
//! * METEOR-lite: METEOR with exact and Porter-stem alignment only (no
//!   synonym stage). `F = P·R / (0.9·P + 0.1·R)`,
//!   `penalty = 0.5 · (chunks / matches)^3`, score `F · (1 − penalty)`.
//!   Its values are not comparable with full METEOR.
//! * EMB_SIM: cosine between the stored embeddings of the two texts.
//!
//! All text metrics tokenize with [`crate::text::tokenize`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::model::{DataError, Dataset, EstimatedAnswers, WorkerId, WorkerRole};
use crate::numerics::{cosine_sim, NumericsError};
use crate::text::tokenize;

const GLEU_MAX_N: usize = 4;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference text is empty")]
    EmptyReference,
    #[error("instance {0:?} has no ground truth")]
    MissingTruth(String),
    #[error("no estimate for instance {0:?}")]
    MissingEstimate(String),
    #[error("embedding similarity needs an embedding store")]
    StoreRequired,
    #[error("role {0} has no answers in the dataset")]
    RoleAbsent(WorkerRole),
    #[error("no instance has at least two answers from role {0}")]
    NoAnswerPairs(WorkerRole),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "GLEU")]
    Gleu,
    #[serde(rename = "METEOR_LITE")]
    MeteorLite,
    #[serde(rename = "EMB_SIM")]
    EmbSim,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Gleu, MetricKind::MeteorLite, MetricKind::EmbSim];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Gleu => "GLEU",
            MetricKind::MeteorLite => "METEOR_LITE",
            MetricKind::EmbSim => "EMB_SIM",
        }
    }

    /// Whether `G(a, b) = G(b, a)` for every pair.
    pub fn is_symmetric(self) -> bool {
        // GLEU: min(m/h, m/r) = m / max(h, r), symmetric in h and r.
        !matches!(self, MetricKind::MeteorLite)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GLEU" => Ok(MetricKind::Gleu),
            "METEOR_LITE" | "METEOR-LITE" => Ok(MetricKind::MeteorLite),
            "EMB_SIM" | "EMB-SIM" => Ok(MetricKind::EmbSim),
            _ => Err(format!("unknown metric {s:?} (expected GLEU, METEOR_LITE or EMB_SIM)")),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn gleu_tokens(hyp: &[String], reference: &[String]) -> f64 {
    let (mut matches, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for n in 1..=GLEU_MAX_N {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        hyp_total += hyp.len().saturating_sub(n - 1);
        ref_total += reference.len().saturating_sub(n - 1);
        matches += h
            .iter()
            .map(|(gram, count)| (*count).min(r.get(gram).copied().unwrap_or(0)))
            .sum::<usize>();
    }
    let denom = hyp_total.max(ref_total);
    if denom == 0 {
        0.0
    } else {
        matches as f64 / denom as f64
    }
}

/// Sentence GLEU of `hypothesis` against a single `reference`.
pub fn gleu(hypothesis: &str, reference: &str) -> Result<f64, MetricError> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(gleu_tokens(&tokenize(hypothesis), &reference))
}

/// Alignment of hypothesis positions to reference positions.
fn align(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let hyp_stems: Vec<String> = hyp.iter().map(|t| porter_stemmer::stem(t)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| porter_stemmer::stem(t)).collect();
    for stage in [(hyp, reference), (&hyp_stems[..], &ref_stems[..])] {
        let (h_keys, r_keys) = stage;
        for i in 0..hyp.len() {
            if hyp_used[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && r_keys[j] == h_keys[i]) {
                hyp_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR without the synonym stage. Alignment is leftmost-greedy within the
/// exact stage, then within the stem stage over the still-unmatched tokens.
pub fn meteor_lite(hypothesis: &str, reference: &str) -> Result<f64, MetricError> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let hyp = tokenize(hypothesis);
    let pairs = align(&hyp, &reference);
    let matches = pairs.len();
    if matches == 0 {
        return Ok(0.0);
    }
    let m = matches as f64;
    let precision = m / hyp.len() as f64;
    let recall = m / reference.len() as f64;
    let fmean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    let frag = count_chunks(&pairs) as f64 / m;
    let penalty = METEOR_GAMMA * frag.powf(METEOR_BETA);
    Ok(fmean * (1.0 - penalty))
}

pub fn emb_sim(hypothesis: &str, reference: &str, store: &EmbeddingStore) -> Result<f64, MetricError> {
    Ok(cosine_sim(store.lookup(hypothesis)?, store.lookup(reference)?)?)
}

/// Dispatches to the metric; `store` is required for [`MetricKind::EmbSim`].
pub fn score(
    kind: MetricKind,
    hypothesis: &str,
    reference: &str,
    store: Option<&EmbeddingStore>,
) -> Result<f64, MetricError> {
    match kind {
        MetricKind::Gleu => gleu(hypothesis, reference),
        MetricKind::MeteorLite => meteor_lite(hypothesis, reference),
        MetricKind::EmbSim => emb_sim(hypothesis, reference, store.ok_or(MetricError::StoreRequired)?),
    }
}

/// Mean per-instance score of the estimates against ground truth.
pub fn score_estimates(
    est: &EstimatedAnswers,
    d: &Dataset,
    kind: MetricKind,
    store: Option<&EmbeddingStore>,
) -> Result<f64, MetricError> {
    let scores = d
        .instances()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|inst| {
            let truth = inst
                .truth
                .as_deref()
                .ok_or_else(|| MetricError::MissingTruth(inst.id.to_string()))?;
            let e = est
                .get(&inst.id)
                .ok_or_else(|| MetricError::MissingEstimate(inst.id.to_string()))?;
            score(kind, &e.text, truth, store)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Spread of per-worker quality within one role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkerQuality {
    pub role: WorkerRole,
    pub workers: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `None` when no instance has two answers from the role.
    pub tiaa: Option<f64>,
}

/// Per-worker mean score against ground truth, keyed by worker.
pub fn per_worker_scores(
    d: &Dataset,
    role: WorkerRole,
    kind: MetricKind,
    store: Option<&EmbeddingStore>,
) -> Result<BTreeMap<WorkerId, f64>, MetricError> {
    let scored = d
        .answers()
        .par_iter()
        .filter(|a| a.worker.role() == role)
        .map(|a| {
            let inst = d.instance(&a.instance).expect("validated dataset");
            let truth = inst
                .truth
                .as_deref()
                .ok_or_else(|| MetricError::MissingTruth(inst.id.to_string()))?;
            Ok((&a.worker, score(kind, &a.text, truth, store)?))
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let mut sums: BTreeMap<WorkerId, (f64, usize)> = BTreeMap::new();
    for (w, s) in scored {
        let entry = sums.entry(w.clone()).or_insert((0.0, 0));
        entry.0 += s;
        entry.1 += 1;
    }
    Ok(sums.into_iter().map(|(w, (s, n))| (w, s / n as f64)).collect())
}

/// MIN/MEAN/MAX/STD over the role's per-worker mean scores (each worker
/// weighted equally), plus the role's TIAA.
pub fn worker_quality(
    d: &Dataset,
    role: WorkerRole,
    kind: MetricKind,
    store: Option<&EmbeddingStore>,
) -> Result<WorkerQuality, MetricError> {
    let per_worker = per_worker_scores(d, role, kind, store)?;
    if per_worker.is_empty() {
        return Err(MetricError::RoleAbsent(role));
    }
    let values: Vec<f64> = per_worker.values().copied().collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let tiaa = match tiaa(d, role, kind, store) {
        Ok(t) => Some(t),
        Err(MetricError::NoAnswerPairs(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(WorkerQuality {
        role,
        workers: values.len(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: var.sqrt(),
        tiaa,
    })
}

/// Text inter-annotator agreement among one role's answers.
///
/// Per instance with at least two answers from the role: the mean of
/// `(G(a, b) + G(b, a)) / 2` over all unordered answer pairs. The result is
/// the mean over those instances; instances with fewer answers are skipped.
pub fn tiaa(
    d: &Dataset,
    role: WorkerRole,
    kind: MetricKind,
    store: Option<&EmbeddingStore>,
) -> Result<f64, MetricError> {
    let groups: Vec<Vec<&str>> = d
        .instance_ids()
        .map(|id| {
            Ok(d.answers_of_instance(id)?
                .iter()
                .filter(|a| a.worker.role() == role)
                .map(|a| a.text.as_str())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, DataError>>()?
        .into_iter()
        .filter(|g| g.len() >= 2)
        .collect();
    if groups.is_empty() {
        return Err(MetricError::NoAnswerPairs(role));
    }
    let per_instance = groups
        .par_iter()
        .map(|texts| {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..texts.len() {
                for j in (i + 1)..texts.len() {
                    let forward = score(kind, texts[i], texts[j], store)?;
                    total += if kind.is_symmetric() {
                        forward
                    } else {
                        0.5 * (forward + score(kind, texts[j], texts[i], store)?)
                    };
                    pairs += 1;
                }
            }
            Ok(total / pairs as f64)
        })
        .collect::<Result<Vec<f64>, MetricError>>()?;
    Ok(per_instance.iter().sum::<f64>() / per_instance.len() as f64)
}
