//! Seeded synthetic crowds with known ground truth.
//!
//! The random stream is fixed so that seeds reproduce across platforms and
//! across reimplementations:
//!
//! * generator: xoshiro256** seeded from the `u64` seed through SplitMix64
//!   (`Xoshiro256StarStar::seed_from_u64`);
//! * uniform: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
//! * normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)` with `u1` drawn
//!   before `u2`; the sine branch is discarded;
//! * draw order: the `dim` normals of every truth vector in instance order,
//!   then for each worker in configuration order and each covered instance in
//!   increasing order, `dim` noise normals (drawn even when the noise scale is
//!   zero).
//!
//! Worker `j` covers `m_j = ⌈coverage_j · n⌉` consecutive instances (mod `n`)
//! starting right after the block of worker `j - 1`, so every instance is
//! covered whenever `Σ m_j ≥ n`.
//!
//! A noiseless worker answers with the truth text itself, so its answers score
//! perfectly under every metric.

use std::collections::BTreeMap;

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::model::{AnswerRecord, DataError, Dataset, Instance, InstanceId, WorkerId, WorkerRole};
use crate::numerics::{self, Vector};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorker {
    pub role: WorkerRole,
    /// Standard deviation of the isotropic noise added to the truth vector.
    pub noise: f64,
    /// Fraction of instances answered, in (0, 1].
    #[serde(default = "full_coverage")]
    pub coverage: f64,
}

fn full_coverage() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_instances: usize,
    pub workers: Vec<SynthWorker>,
    pub seed: u64,
}

impl SynthConfig {
    /// Full-coverage creators, one per noise scale.
    pub fn creators(dim: usize, n_instances: usize, noises: &[f64], seed: u64) -> Self {
        SynthConfig {
            dim,
            n_instances,
            workers: noises
                .iter()
                .map(|&noise| SynthWorker {
                    role: WorkerRole::CrowdCreator,
                    noise,
                    coverage: 1.0,
                })
                .collect(),
            seed,
        }
    }

    /// A small three-role crowd used by the CLI's `synth` command.
    pub fn demo(seed: u64) -> Self {
        let mut workers = Vec::new();
        for j in 0..10 {
            workers.push(SynthWorker {
                role: WorkerRole::CrowdCreator,
                noise: 0.2 + 0.1 * j as f64,
                coverage: 1.0,
            });
        }
        for j in 0..5 {
            workers.push(SynthWorker {
                role: WorkerRole::CrowdAggregator,
                noise: 0.3 + 0.1 * j as f64,
                coverage: 0.5,
            });
        }
        for j in 0..5 {
            workers.push(SynthWorker {
                role: WorkerRole::LlmAggregator,
                noise: 0.35 + 0.02 * j as f64,
                coverage: 1.0,
            });
        }
        SynthConfig {
            dim: 16,
            n_instances: 30,
            workers,
            seed,
        }
    }

    fn block_sizes(&self) -> Vec<usize> {
        self.workers
            .iter()
            .map(|w| ((w.coverage * self.n_instances as f64).ceil() as usize).clamp(1, self.n_instances))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.n_instances == 0 {
            return bad("n_instances must be positive".into());
        }
        if self.workers.is_empty() {
            return bad("at least one worker is required".into());
        }
        for (j, w) in self.workers.iter().enumerate() {
            if !(w.noise >= 0.0 && w.noise.is_finite()) {
                return bad(format!("worker {j}: noise scale must be finite and >= 0"));
            }
            if !(w.coverage > 0.0 && w.coverage <= 1.0) {
                return bad(format!("worker {j}: coverage must be in (0, 1]"));
            }
        }
        let total: usize = self.block_sizes().iter().sum();
        if total < self.n_instances {
            return bad(format!(
                "workers cover {total} answer slots, fewer than {} instances",
                self.n_instances
            ));
        }
        Ok(())
    }
}

/// A generated crowd plus everything the generator knows about it.
#[derive(Debug, Clone)]
pub struct SynthCrowd {
    pub dataset: Dataset,
    pub store: EmbeddingStore,
    pub truth: BTreeMap<InstanceId, Vector>,
    /// Answer closest (cosine) to the truth vector, ties by canonical order.
    pub best: BTreeMap<InstanceId, WorkerId>,
    pub noise: BTreeMap<WorkerId, f64>,
}

struct Stream(Xoshiro256StarStar);

impl Stream {
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn normals(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = numerics::norm(&v);
    v.into_iter().map(|c| c / n).collect()
}

pub fn instance_id(i: usize) -> InstanceId {
    InstanceId::new(format!("q{i:05}")).expect("non-empty")
}

pub fn worker_id(role: WorkerRole, j: usize) -> WorkerId {
    WorkerId::new(role, format!("w{j:03}")).expect("non-empty")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCrowd, SynthError> {
    cfg.validate()?;
    let n = cfg.n_instances;
    let mut rng = Stream(Xoshiro256StarStar::seed_from_u64(cfg.seed));
    let mut store = EmbeddingStore::new(cfg.dim)?;

    let truths: Vec<Vec<f64>> = (0..n).map(|_| unit(rng.normals(cfg.dim))).collect();
    let mut instances = Vec::with_capacity(n);
    let mut truth = BTreeMap::new();
    for (i, z) in truths.iter().enumerate() {
        let text = format!("synthetic truth {i}");
        let v = Vector::new(z.clone()).map_err(EmbeddingError::from)?;
        store.insert(&text, v.clone())?;
        truth.insert(instance_id(i), v);
        instances.push(Instance {
            id: instance_id(i),
            source: format!("synthetic source {i}"),
            truth: Some(text),
        });
    }

    let mut answers = Vec::new();
    let mut noise = BTreeMap::new();
    let mut start = 0usize;
    for (j, (w, m)) in cfg.workers.iter().zip(cfg.block_sizes()).enumerate() {
        let worker = worker_id(w.role, j);
        noise.insert(worker.clone(), w.noise);
        let mut covered: Vec<usize> = (0..m).map(|t| (start + t) % n).collect();
        covered.sort_unstable();
        start = (start + m) % n;
        for i in covered {
            let g = rng.normals(cfg.dim);
            let text = if w.noise == 0.0 {
                format!("synthetic truth {i}")
            } else {
                let v = unit(truths[i].iter().zip(&g).map(|(z, e)| z + w.noise * e).collect());
                let text = format!("synthetic answer {i} by {worker}");
                store.insert(&text, Vector::new(v).map_err(EmbeddingError::from)?)?;
                text
            };
            answers.push(AnswerRecord {
                instance: instance_id(i),
                worker: worker.clone(),
                text,
            });
        }
    }

    let dataset = Dataset::new(instances, answers)?;
    let mut best = BTreeMap::new();
    for id in dataset.instance_ids() {
        let z = truth[id].as_slice();
        let mut top: Option<(&WorkerId, f64)> = None;
        for a in dataset.answers_of_instance(id)? {
            let sim = numerics::cosine_or_zero(store.lookup(&a.text)?.as_slice(), z);
            if top.is_none_or(|(_, s)| sim > s) {
                top = Some((&a.worker, sim));
            }
        }
        best.insert(id.clone(), top.expect("every instance is covered").0.clone());
    }

    Ok(SynthCrowd {
        dataset,
        store,
        truth,
        best,
        noise,
    })
}
