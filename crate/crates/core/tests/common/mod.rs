#![allow(dead_code)]

use cams_core::model::{AnswerRecord, Dataset, Instance, InstanceId, WorkerId, WorkerRole};
use cams_core::{EmbeddingStore, Vector};

/// `shape[i]` holds the answer vectors of instance `i`; answer `j` comes from
/// crowd creator `w{j}` and has text `q{i}-w{j}`.
pub fn build(shape: &[Vec<Vec<f64>>]) -> (Dataset, EmbeddingStore) {
    let dim = shape[0][0].len();
    let mut store = EmbeddingStore::new(dim).unwrap();
    let mut instances = Vec::new();
    let mut answers = Vec::new();
    for (i, vectors) in shape.iter().enumerate() {
        let id = InstanceId::new(format!("q{i:03}")).unwrap();
        instances.push(Instance {
            id: id.clone(),
            source: String::new(),
            truth: None,
        });
        for (j, v) in vectors.iter().enumerate() {
            let text = format!("q{i}-w{j}");
            store.insert(&text, Vector::new(v.clone()).unwrap()).unwrap();
            answers.push(AnswerRecord {
                instance: id.clone(),
                worker: WorkerId::new(WorkerRole::CrowdCreator, format!("w{j}")).unwrap(),
                text,
            });
        }
    }
    (Dataset::new(instances, answers).unwrap(), store)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
