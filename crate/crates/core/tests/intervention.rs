use dkn_core::intervention::{
    baseline_neurons, delta_prob, enhance_eval, plan_for_neurons, subset_sweep, BaselineKind, SuppressionMode,
    SweepReport, SweepRow,
};
use dkn_core::model::{greedy_next, predict_prob, ModelConfig};
use dkn_core::topology::{activate_only, DknSet, NtcParams, ScoredBdc, Stage};
use dkn_core::{InterventionPlan, NeuronId, NeuronWeights, ToyTransformer};

fn model() -> ToyTransformer {
    let mut m = ToyTransformer::init(ModelConfig {
        n_layers: 3,
        d_model: 8,
        d_ff: 6,
        n_heads: 2,
        vocab_size: 16,
        max_seq: 8,
        seed: 5,
    })
    .unwrap();
    for p in m.params_mut() {
        *p *= 4.0;
    }
    m
}

const QUERY: [usize; 4] = [6, 9, 4, 13];
const ANSWER: usize = 11;

fn cluster(members: &[NeuronId]) -> ScoredBdc {
    ScoredBdc {
        members: members.to_vec(),
        birth: 1.0,
        death: 2.0,
        persistence: 1.0,
        capped_persistence: 1.0,
        retention: 1.0,
    }
}

fn dkn(clusters: &[&[NeuronId]]) -> DknSet {
    let mut d = DknSet::empty(&QUERY, ANSWER, &NtcParams::default(), Stage::Located);
    d.bdcs = clusters.iter().map(|c| cluster(c)).collect();
    d
}

fn row(mask: &str, delta: f64) -> SweepRow {
    SweepRow {
        mask: mask.into(),
        size: mask.chars().filter(|&c| c == '1').count(),
        mode: "zero_values".into(),
        prob: 0.1,
        delta_prob: delta,
        excluded: false,
    }
}

#[test]
fn delta_prob_examples() {
    assert_eq!(delta_prob(0.5, 0.25).unwrap(), 50.0);
    assert_eq!(delta_prob(0.3, 0.3).unwrap(), 0.0);
    assert!((delta_prob(0.4, 0.6).unwrap() + 50.0).abs() < 1e-12);
    assert!(delta_prob(0.0, 0.1).is_err());
}

#[test]
fn empty_plan_changes_nothing() {
    let m = model();
    let planned = plan_for_neurons(&[], SuppressionMode::ZeroValues, &m).unwrap();
    assert!(planned.plan.is_empty());
    let p = predict_prob(&m, &QUERY, ANSWER, &InterventionPlan::new()).unwrap();
    assert_eq!(delta_prob(p, predict_prob(&m, &QUERY, ANSWER, &planned.plan).unwrap()).unwrap(), 0.0);
}

#[test]
fn zeroed_neuron_is_silent_everywhere() {
    let m = model();
    let target = NeuronId::new(1, 4);
    let plan = plan_for_neurons(&[target], SuppressionMode::ZeroValues, &m).unwrap().plan;
    let trace = m.forward(&QUERY, &plan, true).unwrap().trace.unwrap();
    for t in 0..QUERY.len() {
        assert_eq!(trace.activation(target, t), 0.0);
    }
}

#[test]
fn null_edges_on_adjacent_pair_cut_one_edge() {
    let m = model();
    let (a, b) = (NeuronId::new(0, 1), NeuronId::new(1, 2));
    assert_ne!(m.pathway_weight(a, b), 0.0);
    let planned = plan_for_neurons(&[a, b], SuppressionMode::NullEdges, &m).unwrap();
    assert_eq!(planned.plan.edge_edits().len(), 1);
    assert_eq!(planned.plan.edge_edits()[&(a, b)], 0.0);
    let same_layer = plan_for_neurons(&[a, NeuronId::new(0, 3)], SuppressionMode::NullEdges, &m).unwrap();
    assert!(same_layer.plan.is_empty());
    assert!(same_layer.warning.is_some());
}

#[test]
fn single_cluster_sweep_has_one_row_and_no_partial_mean() {
    let m = model();
    let d = dkn(&[&[NeuronId::new(0, 0), NeuronId::new(1, 1)]]);
    let r = subset_sweep(&m, &d, &QUERY, ANSWER, SuppressionMode::ZeroValues, 0).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.partial_mean, None);
    assert!(r.full.is_some());
    assert_eq!(r.last_point_jump(), None);
}

#[test]
fn sweep_covers_every_nonempty_subset_in_mask_order() {
    let m = model();
    let d = dkn(&[&[NeuronId::new(0, 0)], &[NeuronId::new(1, 1)], &[NeuronId::new(2, 5), NeuronId::new(2, 2)]]);
    let r = subset_sweep(&m, &d, &QUERY, ANSWER, SuppressionMode::ZeroValues, 0).unwrap();
    let masks: Vec<&str> = r.rows.iter().map(|x| x.mask.as_str()).collect();
    assert_eq!(masks, ["100", "010", "110", "001", "101", "011", "111"]);
    let again = subset_sweep(&m, &d, &QUERY, ANSWER, SuppressionMode::ZeroValues, 9).unwrap();
    assert_eq!(r, again);
    assert!(r.to_csv().lines().count() == 8);
}

#[test]
fn rows_above_exclusion_are_dropped_and_flagged() {
    let rows = vec![row("10", 20.0), row("01", 950.0), row("11", 60.0)];
    let r = SweepReport::from_rows(None, 2, SuppressionMode::ZeroValues, 0.5, rows, false, vec![]);
    assert!(r.flagged);
    assert!(r.rows[1].excluded && !r.rows[0].excluded);
    assert_eq!(r.partial_mean, Some(20.0));
    assert_eq!(r.full, Some(60.0));
    assert_eq!(r.by_size, vec![Some(0.0), Some(20.0), Some(60.0)]);
    // exactly at the threshold is kept
    let r = SweepReport::from_rows(None, 2, SuppressionMode::ZeroValues, 0.5, vec![row("11", 900.0)], false, vec![]);
    assert!(!r.flagged);
}

#[test]
fn row_order_does_not_change_aggregates() {
    let rows = vec![row("100", 5.0), row("010", 7.0), row("110", 9.0), row("001", 1.0), row("111", 40.0)];
    let mut rev = rows.clone();
    rev.reverse();
    let a = SweepReport::from_rows(None, 3, SuppressionMode::ZeroValues, 0.5, rows, false, vec![]);
    let b = SweepReport::from_rows(None, 3, SuppressionMode::ZeroValues, 0.5, rev, false, vec![]);
    assert_eq!((a.partial_mean, a.full, &a.by_size), (b.partial_mean, b.full, &b.by_size));
    assert_eq!(a.last_point_jump(), Some(true));
}

#[test]
fn whole_knowledge_set_alone_matches_unedited_model() {
    let m = model();
    let kns = [NeuronId::new(0, 0), NeuronId::new(1, 3), NeuronId::new(2, 1)];
    let p = predict_prob(&m, &QUERY, ANSWER, &InterventionPlan::new()).unwrap();
    assert_eq!(activate_only(&m, &kns, &kns, &QUERY, ANSWER).unwrap(), p);
}

/// Queries the unedited model answers wrongly.
fn wrong_queries(m: &ToyTransformer) -> Vec<(Vec<usize>, usize)> {
    let none = InterventionPlan::new();
    (4..12)
        .map(|s| vec![s, s + 1, 3])
        .map(|q| {
            let g = greedy_next(m, &q, &none).unwrap();
            (q, (g + 1) % 16)
        })
        .collect()
}

#[test]
fn enhancing_nothing_or_by_one_fixes_nothing() {
    let m = model();
    let errs = wrong_queries(&m);
    assert_eq!(enhance_eval(&m, &[], &errs, SuppressionMode::ScaleValues { factor: 2.0 }).unwrap(), 0.0);
    let some = [NeuronId::new(0, 2), NeuronId::new(1, 0)];
    assert_eq!(enhance_eval(&m, &some, &errs, SuppressionMode::ScaleValues { factor: 1.0 }).unwrap(), 0.0);
    assert!(enhance_eval(&m, &some, &[], SuppressionMode::ScaleValues { factor: 2.0 }).is_err());
}

#[test]
fn baselines() {
    let m = model();
    let d = [NeuronId::new(0, 0), NeuronId::new(2, 3)];
    let kns = [NeuronId::new(1, 1), NeuronId::new(0, 0), NeuronId::new(1, 1)];
    assert!(baseline_neurons(BaselineKind::None, &m, &d, &kns, 1, 0).unwrap().is_empty());
    assert_eq!(
        baseline_neurons(BaselineKind::Kns, &m, &d, &kns, 1, 0).unwrap(),
        vec![NeuronId::new(0, 0), NeuronId::new(1, 1)]
    );
    let a = baseline_neurons(BaselineKind::RandomMatched, &m, &d, &kns, 1, 7).unwrap();
    let b = baseline_neurons(BaselineKind::RandomMatched, &m, &d, &kns, 1, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), d.len());
    assert!(a.iter().all(|n| !d.contains(n)));
    let others: Vec<_> =
        (0..20).map(|i| baseline_neurons(BaselineKind::RandomMatched, &m, &d, &kns, 1, i).unwrap()).collect();
    assert!(others.iter().any(|o| *o != a));
}
