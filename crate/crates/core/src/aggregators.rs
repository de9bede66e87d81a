//! Extractive model aggregators: each selects exactly one existing answer per
//! instance.
//!
//! * SMV: pick the answer closest (cosine) to the mean answer embedding.
//! * SMS: pick the answer with the largest summed cosine to the other answers.
//! * RASA: alternate worker-reliability and weighted-centroid updates, then
//!   pick the answer closest to the final centroid.
//!
//! Ties are always resolved in favour of the first answer in canonical order
//! (role, then local worker id).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::model::{Dataset, Estimate, EstimatedAnswers, InstanceId, Provenance, WorkerId};
use crate::numerics::{self, chi2_quantile, NumericsError, TailConvention, Vector};

/// Added to each worker's summed squared distance before dividing, so that a
/// worker in perfect agreement with the centroids gets a large finite weight.
pub const THETA_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("chi-squared quantile failed: {0}")]
    Numerics(#[from] NumericsError),
    #[error("invalid RASA parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AggregatorKind {
    #[serde(rename = "SMV")]
    Smv,
    #[serde(rename = "SMS")]
    Sms,
    #[serde(rename = "RASA")]
    Rasa,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 3] = [AggregatorKind::Smv, AggregatorKind::Sms, AggregatorKind::Rasa];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Smv => "SMV",
            AggregatorKind::Sms => "SMS",
            AggregatorKind::Rasa => "RASA",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SMV" => Ok(AggregatorKind::Smv),
            "SMS" => Ok(AggregatorKind::Sms),
            "RASA" => Ok(AggregatorKind::Rasa),
            _ => Err(format!("unknown aggregator {s:?} (expected SMV, SMS or RASA)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasaParams {
    /// Significance level; the quantile is taken at `alpha / 2`.
    pub alpha: f64,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid component change.
    pub tol: f64,
    pub tail: TailConvention,
    /// Test hook: hold every θ at 1, reducing the centroid update to a plain mean.
    #[serde(skip)]
    pub equal_theta: bool,
}

impl Default for RasaParams {
    fn default() -> Self {
        RasaParams {
            alpha: 0.05,
            max_iter: 100,
            tol: 1e-6,
            tail: TailConvention::Upper,
            equal_theta: false,
        }
    }
}

impl RasaParams {
    pub fn validate(&self) -> Result<(), AggregateError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AggregateError::InvalidParams(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if self.max_iter == 0 {
            return Err(AggregateError::InvalidParams("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(AggregateError::InvalidParams(format!("tol {} must be positive", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorParams {
    pub rasa: RasaParams,
}

/// RASA's final per-worker weights and per-instance centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityState {
    pub theta: BTreeMap<WorkerId, f64>,
    pub centroids: BTreeMap<InstanceId, Vector>,
    pub iteration: usize,
    pub converged: bool,
    /// Largest centroid component change after each iteration.
    pub deltas: Vec<f64>,
}

/// Answer embeddings in canonical answer order, plus per-instance index ranges.
struct Prepared<'a> {
    vectors: Vec<&'a [f64]>,
    ranges: Vec<(InstanceId, std::ops::Range<usize>)>,
}

impl<'a> Prepared<'a> {
    fn new(d: &Dataset, store: &'a EmbeddingStore) -> Result<Self, AggregateError> {
        let vectors = d
            .answers()
            .iter()
            .map(|a| store.lookup(&a.text).map(|v| v.as_slice()))
            .collect::<Result<Vec<_>, _>>()?;
        let ranges = d
            .instance_ids()
            .map(|id| {
                let r = d.answer_range(id).expect("instance ids come from the dataset");
                (id.clone(), r)
            })
            .collect();
        Ok(Prepared { vectors, ranges })
    }

    fn estimates(&self, d: &Dataset, chosen: &[usize]) -> EstimatedAnswers {
        self.ranges
            .iter()
            .zip(chosen)
            .map(|((id, _), &idx)| {
                let a = &d.answers()[idx];
                (
                    id.clone(),
                    Estimate {
                        text: a.text.clone(),
                        provenance: Provenance::Worker(a.worker.clone()),
                    },
                )
            })
            .collect()
    }
}

/// Index of the first maximum; NaN scores never win.
fn first_argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.into_iter().enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn mean_of(vectors: &[&[f64]]) -> Vec<f64> {
    let mut sum = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (s, c) in sum.iter_mut().zip(v.iter()) {
            *s += c;
        }
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

fn closest_to(vectors: &[&[f64]], centroid: &[f64]) -> usize {
    first_argmax(vectors.iter().map(|v| numerics::cosine_or_zero(v, centroid)))
}

/// Sequence majority voting.
pub fn smv(d: &Dataset, store: &EmbeddingStore) -> Result<EstimatedAnswers, AggregateError> {
    let prep = Prepared::new(d, store)?;
    let chosen: Vec<usize> = prep
        .ranges
        .par_iter()
        .map(|(_, r)| {
            let vs = &prep.vectors[r.clone()];
            r.start + closest_to(vs, &mean_of(vs))
        })
        .collect();
    Ok(prep.estimates(d, &chosen))
}

/// Summed cosine of each vector to every other vector, each pair computed
/// once and accumulated in index order.
pub(crate) fn pairwise_similarity_sums(vectors: &[&[f64]]) -> Vec<f64> {
    let n = vectors.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = numerics::cosine_or_zero(vectors[i], vectors[j]);
            sums[i] += c;
            sums[j] += c;
        }
    }
    sums
}

/// Sequence maximum similarity.
pub fn sms(d: &Dataset, store: &EmbeddingStore) -> Result<EstimatedAnswers, AggregateError> {
    let prep = Prepared::new(d, store)?;
    let chosen: Vec<usize> = prep
        .ranges
        .par_iter()
        .map(|(_, r)| r.start + first_argmax(pairwise_similarity_sums(&prep.vectors[r.clone()])))
        .collect();
    Ok(prep.estimates(d, &chosen))
}

/// Reliability-aware sequence aggregation.
///
/// Centroids start at the per-instance means. Each iteration first sets
/// `θ_j = χ²(α/2, |A_j|) / (Σ_i ‖e(a_ij) − ê_i‖² + ε)` over all of worker j's
/// answers, then `ê_i = Σ_j θ_j e(a_ij) / Σ_j θ_j` over instance i's answers.
/// Iteration stops once no centroid component moves by `tol` or more, or after
/// `max_iter` iterations.
pub fn rasa(
    d: &Dataset,
    store: &EmbeddingStore,
    params: &RasaParams,
) -> Result<(EstimatedAnswers, ReliabilityState), AggregateError> {
    params.validate()?;
    let prep = Prepared::new(d, store)?;
    let answers = d.answers();

    let workers: Vec<WorkerId> = d.workers().into_iter().cloned().collect();
    let worker_index: BTreeMap<&WorkerId, usize> = workers.iter().enumerate().map(|(i, w)| (w, i)).collect();
    let answer_worker: Vec<usize> = answers.iter().map(|a| worker_index[&a.worker]).collect();
    let mut counts = vec![0u32; workers.len()];
    for &w in &answer_worker {
        counts[w] += 1;
    }
    let mut quantile_cache: BTreeMap<u32, f64> = BTreeMap::new();
    let mut quantiles = Vec::with_capacity(workers.len());
    for &n in &counts {
        let q = match quantile_cache.get(&n) {
            Some(&q) => q,
            None => {
                let q = chi2_quantile(params.alpha / 2.0, n, params.tail)?;
                quantile_cache.insert(n, q);
                q
            }
        };
        quantiles.push(q);
    }

    let mut answer_instance = vec![0usize; answers.len()];
    for (k, (_, r)) in prep.ranges.iter().enumerate() {
        answer_instance[r.clone()].iter_mut().for_each(|slot| *slot = k);
    }

    let mut centroids: Vec<Vec<f64>> = prep
        .ranges
        .par_iter()
        .map(|(_, r)| mean_of(&prep.vectors[r.clone()]))
        .collect();
    let mut theta = vec![1.0; workers.len()];
    let mut deltas = Vec::new();
    let mut converged = false;

    for _ in 0..params.max_iter {
        if !params.equal_theta {
            let distances: Vec<f64> = prep
                .vectors
                .par_iter()
                .zip(answer_instance.par_iter())
                .map(|(v, &k)| numerics::sq_distance(v, &centroids[k]))
                .collect();
            let mut denom = vec![0.0; workers.len()];
            for (dist, &w) in distances.iter().zip(&answer_worker) {
                denom[w] += dist;
            }
            for ((t, q), den) in theta.iter_mut().zip(&quantiles).zip(&denom) {
                *t = q / (den + THETA_EPSILON);
            }
        }

        let updated: Vec<Vec<f64>> = prep
            .ranges
            .par_iter()
            .map(|(_, r)| {
                let dim = prep.vectors[r.start].len();
                let mut num = vec![0.0; dim];
                let mut total = 0.0;
                for idx in r.clone() {
                    let t = theta[answer_worker[idx]];
                    total += t;
                    for (n, c) in num.iter_mut().zip(prep.vectors[idx]) {
                        *n += t * c;
                    }
                }
                num.iter_mut().for_each(|n| *n /= total);
                num
            })
            .collect();

        let delta = centroids
            .iter()
            .zip(&updated)
            .flat_map(|(old, new)| old.iter().zip(new).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        centroids = updated;
        deltas.push(delta);
        log::debug!("rasa iteration {}: max centroid change {delta:e}", deltas.len());
        if delta < params.tol {
            converged = true;
            break;
        }
    }

    let chosen: Vec<usize> = prep
        .ranges
        .par_iter()
        .zip(centroids.par_iter())
        .map(|((_, r), c)| r.start + closest_to(&prep.vectors[r.clone()], c))
        .collect();

    let state = ReliabilityState {
        theta: workers.into_iter().zip(theta).collect(),
        centroids: prep
            .ranges
            .iter()
            .zip(centroids)
            .map(|((id, _), c)| Ok((id.clone(), Vector::new(c)?)))
            .collect::<Result<_, NumericsError>>()?,
        iteration: deltas.len(),
        converged,
        deltas,
    };
    Ok((prep.estimates(d, &chosen), state))
}

/// Uniform entry point: exactly one selected answer per instance.
pub fn run_aggregator(
    kind: AggregatorKind,
    d: &Dataset,
    store: &EmbeddingStore,
    params: &AggregatorParams,
) -> Result<EstimatedAnswers, AggregateError> {
    match kind {
        AggregatorKind::Smv => smv(d, store),
        AggregatorKind::Sms => sms(d, store),
        AggregatorKind::Rasa => rasa(d, store, &params.rasa).map(|(est, _)| est),
    }
}
