use cams_core::aggregators::{rasa, smv, RasaParams};
use cams_core::model::WorkerRole;
use cams_core::pipeline::{merge_resources, ResourceSelection};
use cams_core::synthgen::{generate, SynthConfig, SynthWorker};

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            out[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_helper() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
}

#[test]
fn rasa_recovers_worker_reliability() {
    let noises: Vec<f64> = (0..8).map(|k| 0.05 + k as f64 * (1.15 / 7.0)).collect();
    for seed in 0..5 {
        let crowd = generate(&SynthConfig::creators(16, 200, &noises, seed)).unwrap();
        let (est, state) = rasa(&crowd.dataset, &crowd.store, &RasaParams::default()).unwrap();
        let neg_sigma: Vec<f64> = state.theta.keys().map(|w| -crowd.noise[w]).collect();
        let theta: Vec<f64> = state.theta.values().copied().collect();
        assert!(spearman(&neg_sigma, &theta) >= 0.8, "seed {seed}");

        let agree = |e: &cams_core::model::EstimatedAnswers| {
            e.iter()
                .filter(|(id, a)| a.provenance == cams_core::model::Provenance::Worker(crowd.best[*id].clone()))
                .count()
        };
        assert!(agree(&est) >= agree(&smv(&crowd.dataset, &crowd.store).unwrap()), "seed {seed}");
    }
}

/// Workers split into two block sizes so per-role totals hit exact counts.
fn workers(role: WorkerRole, n: usize, big: (usize, usize), small: (usize, usize)) -> Vec<SynthWorker> {
    let mk = |count: usize, size: usize| {
        (0..count).map(move |k| SynthWorker {
            role,
            noise: 0.3 + 0.01 * k as f64,
            coverage: (size as f64 - 0.5) / n as f64,
        })
    };
    mk(big.0, big.1).chain(mk(small.0, small.1)).collect()
}

#[test]
fn j1_shaped_crowd_counts() {
    let n = 250;
    let mut all = workers(WorkerRole::CrowdCreator, n, (40, 36), (30, 35));
    all.extend(workers(WorkerRole::CrowdAggregator, n, (84, 12), (22, 11)));
    all.extend((0..5).map(|_| SynthWorker {
        role: WorkerRole::LlmAggregator,
        noise: 0.4,
        coverage: 1.0,
    }));
    let crowd = generate(&SynthConfig {
        dim: 8,
        n_instances: n,
        workers: all,
        seed: 1,
    })
    .unwrap();
    let stats = crowd.dataset.stats();
    assert_eq!(stats.role(WorkerRole::CrowdCreator).workers, 70);
    assert_eq!(stats.role(WorkerRole::CrowdCreator).answers, 2490);
    assert_eq!(stats.role(WorkerRole::CrowdAggregator).workers, 106);
    assert_eq!(stats.role(WorkerRole::CrowdAggregator).answers, 1250);
    assert_eq!(stats.role(WorkerRole::LlmAggregator).answers, 1250);

    let merged = merge_resources(std::slice::from_ref(&crowd.dataset), &ResourceSelection::new(true, true, true)).unwrap();
    assert_eq!(merged.worker_count(), 70 + 106 + 5);
    assert_eq!(merged.answer_count(), 2490 + 1250 + 1250);
}

#[test]
fn rasa_finds_the_standout_worker() {
    let mut noises = vec![1.0; 7];
    noises.insert(3, 0.01);
    let mut shares: Vec<f64> = (0..50)
        .map(|seed| {
            let crowd = generate(&SynthConfig::creators(16, 200, &noises, seed)).unwrap();
            let (est, _) = rasa(&crowd.dataset, &crowd.store, &RasaParams::default()).unwrap();
            let hits = est
                .iter()
                .filter(|(_, e)| matches!(&e.provenance, cams_core::model::Provenance::Worker(w) if w.local_id() == "w003"))
                .count();
            hits as f64 / 200.0
        })
        .collect();
    shares.sort_by(f64::total_cmp);
    let median = 0.5 * (shares[24] + shares[25]);
    assert!(median >= 0.8, "median share {median}");
}

#[test]
fn noiseless_crowd_scores_perfectly() {
    use cams_core::aggregators::{run_aggregator, AggregatorKind, AggregatorParams};
    use cams_core::metrics::{score_estimates, MetricKind};
    let crowd = generate(&SynthConfig::creators(4, 10, &[0.0, 0.0], 9)).unwrap();
    for kind in AggregatorKind::ALL {
        let est = run_aggregator(kind, &crowd.dataset, &crowd.store, &AggregatorParams::default()).unwrap();
        // METEOR-lite keeps its fragmentation penalty even on identical text
        for metric in [MetricKind::Gleu, MetricKind::EmbSim] {
            let s = score_estimates(&est, &crowd.dataset, metric, Some(&crowd.store)).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "{kind} {metric} {s}");
        }
    }
}
