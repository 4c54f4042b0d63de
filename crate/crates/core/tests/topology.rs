use proptest::prelude::*;

use dkn_core::topology::{
    adjacent_distance, merge_tree, persistence_filtration, select_bdcs, tau1, Bdc, DistanceGraph, NestedPolicy,
    NtcParams,
};
use dkn_core::NeuronId;

fn n(i: usize) -> NeuronId {
    NeuronId::new(0, i)
}

/// Symmetric graph from upper-triangle entries; `None` is a missing edge.
fn graph(k: usize, upper: &[Option<f64>]) -> DistanceGraph {
    let mut d = vec![0.0; k * k];
    let mut it = upper.iter();
    for i in 0..k {
        for j in i + 1..k {
            let v = it.next().copied().flatten().unwrap_or(f64::INFINITY);
            d[i * k + j] = v;
            d[j * k + i] = v;
        }
    }
    DistanceGraph::from_matrix((0..k).map(n).collect(), d).unwrap()
}

fn arb_graph() -> impl Strategy<Value = DistanceGraph> {
    (1usize..9).prop_flat_map(|k| {
        let edge = prop_oneof![Just(None), (1u8..5).prop_map(|v| Some(v as f64)), (0.05f64..8.0).prop_map(Some),];
        proptest::collection::vec(edge, k * (k - 1) / 2).prop_map(move |u| graph(k, &u))
    })
}

#[test]
fn reciprocal_adjacent_distance() {
    assert_eq!(adjacent_distance(0.5), 2.0);
    assert_eq!(adjacent_distance(-0.25), 4.0);
    assert_eq!(adjacent_distance(0.0), f64::INFINITY);
}

#[test]
fn single_neuron_and_disconnected_pair_give_no_clusters() {
    assert!(persistence_filtration(&graph(1, &[])).is_empty());
    assert!(persistence_filtration(&graph(2, &[None])).is_empty());
}

#[test]
fn middle_cluster_of_figure_two_persists_one_unit() {
    let g = graph(4, &[Some(1.0), None, None, Some(2.0), Some(3.0), None]);
    let bdcs = persistence_filtration(&g);
    let abc = bdcs.iter().find(|b| b.members == vec![n(0), n(1), n(2)]).unwrap();
    assert_eq!(abc.persistence(), 1.0);
}

fn disjoint_bdcs(persistences: &[f64]) -> Vec<Bdc> {
    persistences
        .iter()
        .enumerate()
        .map(|(i, &p)| Bdc { members: vec![n(2 * i), n(2 * i + 1)], birth: 0.5, death: 0.5 + p })
        .collect()
}

#[test]
fn first_gate_keeps_only_long_lived_clusters() {
    let bdcs = disjoint_bdcs(&[1.0, 2.0, 4.0]);
    assert_eq!(tau1(&bdcs, 0.5), 2.0);
    let params = NtcParams { tau2: 0.0, ..NtcParams::default() };
    assert_eq!(select_bdcs(&bdcs, &[1.0; 3], &params), vec![2]);
}

#[test]
fn zero_tau2_lets_every_retention_through() {
    let bdcs = disjoint_bdcs(&[1.0, 2.0, 4.0]);
    let params = NtcParams { tau1_factor: 0.0, tau2: 0.0, nested: NestedPolicy::KeepAll };
    assert_eq!(select_bdcs(&bdcs, &[0.0; 3], &params), vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn clusters_are_laminar(g in arb_graph()) {
        let bdcs = persistence_filtration(&g);
        for a in &bdcs {
            for b in &bdcs {
                prop_assert!(a.contains_all(b) || b.contains_all(a) || a.is_disjoint(b));
            }
        }
    }

    #[test]
    fn scaling_distances_scales_radii(g in arb_graph(), c in 0.1f64..10.0) {
        let base = persistence_filtration(&g);
        let scaled = persistence_filtration(&g.scaled(c));
        prop_assert_eq!(base.len(), scaled.len());
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert_eq!(&a.members, &b.members);
            prop_assert!((a.birth * c - b.birth).abs() <= 1e-12 * b.birth.abs().max(1.0));
            if a.death.is_finite() {
                prop_assert!((a.death * c - b.death).abs() <= 1e-12 * b.death.abs().max(1.0));
            } else {
                prop_assert!(b.death.is_infinite());
            }
        }
    }

    #[test]
    fn forest_has_one_merge_per_lost_component(g in arb_graph()) {
        let tree = merge_tree(&g);
        let roots = tree.clusters_at(f64::MAX).len();
        prop_assert_eq!(tree.merge_radii().len(), g.len() - roots);
        prop_assert_eq!(tree.clusters_at(0.0).len(), g.len());
    }

    #[test]
    fn births_never_exceed_deaths(g in arb_graph()) {
        for b in persistence_filtration(&g) {
            prop_assert!(b.birth < b.death);
            prop_assert!(b.members.len() >= 2);
        }
    }

    #[test]
    fn larger_tau1_factor_never_adds_clusters(p in proptest::collection::vec(0.1f64..5.0, 1..6), f in 0.0f64..1.0, g in 0.0f64..1.0) {
        let bdcs = disjoint_bdcs(&p);
        let (lo, hi) = if f <= g { (f, g) } else { (g, f) };
        let keep = |factor| select_bdcs(&bdcs, &vec![1.0; p.len()], &NtcParams { tau1_factor: factor, tau2: 0.0, nested: NestedPolicy::KeepAll });
        let (a, b) = (keep(lo), keep(hi));
        prop_assert!(b.iter().all(|i| a.contains(i)));
    }
}
