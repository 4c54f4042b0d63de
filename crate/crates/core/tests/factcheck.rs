use proptest::prelude::*;
use rand::Rng;

use dkn_core::factcheck::{
    aggregate_relation, calibrate_tau4, corrupt_answers, label, split_relation, CheckRecord, NTotalRule,
};
use dkn_core::{rng, NeuronId};

fn n(i: usize) -> NeuronId {
    NeuronId::new(i % 2, i)
}

/// Ten queries over ten neurons; `n(0)` appears in eight of them.
fn ten_queries() -> Vec<Vec<NeuronId>> {
    (0..10).map(|i| if i < 8 { vec![n(0), n(i + 1)] } else { vec![n(i)] }).collect()
}

#[test]
fn tau3_example_under_both_rules() {
    for rule in [NTotalRule::UnionSize, NTotalRule::QueryCount] {
        let r = aggregate_relation("P1", &ten_queries(), 0.7, rule).unwrap();
        assert_eq!(r.n_total, 10);
        assert!((r.tau3 - 7.0).abs() < 1e-12);
        assert_eq!(r.neurons, vec![n(0)]);
        assert_eq!(r.counts[&n(0)], 8);
    }
}

#[test]
fn zero_factor_keeps_every_neuron() {
    let r = aggregate_relation("P1", &ten_queries(), 0.0, NTotalRule::UnionSize).unwrap();
    assert_eq!(r.neurons.len(), 10);
}

#[test]
fn two_answer_pool_forces_the_other_answer() {
    let recs = corrupt_answers(&[(vec![4, 5], 8), (vec![6], 9)], &[8, 9], 0, "P1").unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!((recs[1].candidate, recs[1].gold), (9, false));
    assert_eq!((recs[3].candidate, recs[3].gold), (8, false));
    assert!(recs[0].gold && recs[2].gold);
}

#[test]
fn threshold_labels() {
    let rec = CheckRecord { query: vec![1], candidate: 2, gold_answer: 2, gold: true };
    assert!(label(&rec, 0.6, false, 0.5).predicted);
    assert!(label(&rec, 1e-9, false, 0.0).predicted);
    assert!(!label(&rec, 0.5, false, 0.5).predicted);
    assert_eq!(label(&rec, 0.3, false, 0.1), label(&rec, 0.3, false, 0.1));
}

fn noise(seed: u64, len: usize) -> Vec<(f64, bool)> {
    let mut r = rng::substream(seed, "test/noise");
    (0..len).map(|i| (r.random::<f64>(), i % 2 == 0)).collect()
}

#[test]
fn uninformative_scores_calibrate_to_the_all_true_bound() {
    let t = calibrate_tau4(&noise(1, 4000), 101).unwrap();
    assert!((t.f1 - 2.0 / 3.0).abs() < 0.02, "{}", t.f1);
}

#[test]
fn finer_grid_changes_f1_little() {
    for seed in 0..5 {
        let s: Vec<(f64, bool)> = noise(seed, 600).into_iter().map(|(x, g)| (if g { x + 0.3 } else { x }, g)).collect();
        let a = calibrate_tau4(&s, 101).unwrap();
        let b = calibrate_tau4(&s, 201).unwrap();
        assert!((a.f1 - b.f1).abs() <= 0.01, "{} vs {}", a.f1, b.f1);
    }
}

#[test]
fn equal_scores_are_degenerate() {
    let t = calibrate_tau4(&[(0.4, true), (0.4, false)], 101).unwrap();
    assert!(t.degenerate);
    assert_eq!(t.tau4, 0.4);
}

proptest! {
    #[test]
    fn larger_tau3_factor_keeps_fewer(
        sets in proptest::collection::vec(proptest::collection::btree_set(0usize..12, 0..6), 1..12),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let per_query: Vec<Vec<NeuronId>> = sets.iter().map(|s| s.iter().map(|&i| n(i)).collect()).collect();
        prop_assume!(per_query.iter().any(|s| !s.is_empty()));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for rule in [NTotalRule::UnionSize, NTotalRule::QueryCount] {
            let wide = aggregate_relation("r", &per_query, lo, rule).unwrap();
            let narrow = aggregate_relation("r", &per_query, hi, rule).unwrap();
            prop_assert!(narrow.neurons.iter().all(|x| wide.neurons.contains(x)));
        }
    }

    #[test]
    fn split_is_a_partition(len in 4usize..60, ratio in 0.05f64..0.95, seed in 0u64..50) {
        let items: Vec<usize> = (0..len).collect();
        let (a, b) = split_relation(&items, ratio, seed, "r").unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        prop_assert_eq!(all, items);
    }
}
