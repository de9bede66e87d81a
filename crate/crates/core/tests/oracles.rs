mod common;

use cams_core::aggregators::sms;
use cams_core::metrics::gleu;
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn uniform(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Every ordered pair visited; first strict maximum wins.
fn sms_double_loop(vectors: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for i in 0..vectors.len() {
        let mut sum = 0.0;
        for j in 0..vectors.len() {
            if i != j {
                sum += common::cosine(&vectors[i], &vectors[j]);
            }
        }
        if sum > best_sum {
            best = i;
            best_sum = sum;
        }
    }
    best
}

#[test]
fn sms_matches_double_loop_on_random_instances() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2024);
    let shape: Vec<Vec<Vec<f64>>> = (0..500)
        .map(|_| {
            let n = 2 + (rng.next_u64() % 5) as usize;
            (0..n)
                .map(|_| (0..8).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect())
                .collect()
        })
        .collect();
    let (d, store) = common::build(&shape);
    let est = sms(&d, &store).unwrap();
    let mut mismatches = 0;
    for (i, vectors) in shape.iter().enumerate() {
        let expected = format!("q{i}-w{}", sms_double_loop(vectors));
        let id = d.instance_ids().nth(i).unwrap();
        if est.get(id).unwrap().text != expected {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

/// Clipped n-gram matches by linear scans over token lists.
fn gleu_brute_force(hyp: &[&str], reference: &[&str]) -> f64 {
    let (mut m, mut h, mut r) = (0usize, 0usize, 0usize);
    for n in 1..=4 {
        let hg: Vec<&[&str]> = if hyp.len() >= n { hyp.windows(n).collect() } else { vec![] };
        let rg: Vec<&[&str]> = if reference.len() >= n { reference.windows(n).collect() } else { vec![] };
        h += hg.len();
        r += rg.len();
        let mut seen: Vec<&[&str]> = Vec::new();
        for g in &hg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_hyp = hg.iter().filter(|x| *x == g).count();
            let in_ref = rg.iter().filter(|x| *x == g).count();
            m += in_hyp.min(in_ref);
        }
    }
    if h.max(r) == 0 {
        0.0
    } else {
        m as f64 / h.max(r) as f64
    }
}

#[test]
fn gleu_matches_brute_force_counter() {
    const VOCAB: [&str; 6] = ["the", "cat", "sat", "on", "a", "mat"];
    const OTHER: [&str; 4] = ["dog", "ran", "far", "away"];
    let mut rng = Xoshiro256StarStar::seed_from_u64(7);
    let draw = |vocab: &[&'static str], rng: &mut Xoshiro256StarStar| -> Vec<&'static str> {
        let len = 1 + (rng.next_u64() % 9) as usize;
        (0..len).map(|_| vocab[(rng.next_u64() % vocab.len() as u64) as usize]).collect()
    };
    for _ in 0..1000 {
        let hyp = draw(&VOCAB, &mut rng);
        let reference = draw(&VOCAB, &mut rng);
        let disjoint = draw(&OTHER, &mut rng);
        let (hs, rs, ds) = (hyp.join(" "), reference.join(" "), disjoint.join(" "));
        assert_eq!(gleu(&hs, &rs).unwrap(), gleu_brute_force(&hyp, &reference), "{hs:?} vs {rs:?}");
        assert_eq!(gleu(&hs, &hs).unwrap(), 1.0);
        assert_eq!(gleu(&ds, &rs).unwrap(), 0.0);
    }
    assert_eq!(gleu("the cat sat", "the cat").unwrap(), 0.5);
}
