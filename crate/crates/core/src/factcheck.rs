//! Relation-level neuron aggregation and attribution-threshold fact checking.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_all, AttributionResult};
use crate::error::{Error, Result};
use crate::model::{NeuronId, TokenId, ToyTransformer};
use crate::rng;

pub const DEFAULT_TAU3_FACTOR: f64 = 0.7;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.5;
pub const TAU4_CANDIDATES: usize = 101;

/// Seeded partition of one relation's queries into an acquisition half and a
/// test half.
pub fn split_relation<T: Clone>(items: &[T], ratio: f64, seed: u64, relation: &str) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 4 {
        return Err(Error::arg(format!("relation {relation} has {} queries; need at least 4", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::substream(seed, &format!("{}/{relation}", rng::SPLIT)));
    let cut = ((items.len() as f64 * ratio).round() as usize).clamp(1, items.len() - 1);
    let (a, b) = idx.split_at(cut);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a.iter().map(|&i| items[i].clone()).collect(), b.iter().map(|&i| items[i].clone()).collect()))
}

/// What `N_total` counts in the `τ₃ = factor × N_total` rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NTotalRule {
    /// Distinct neurons in the union of the per-query sets.
    #[default]
    UnionSize,
    /// Number of per-query sets contributing (non-empty ones).
    QueryCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDkn {
    pub relation: String,
    pub neurons: Vec<NeuronId>,
    pub counts: BTreeMap<NeuronId, usize>,
    pub n_total: usize,
    pub tau3: f64,
    pub rule: NTotalRule,
}

impl RelationDkn {
    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }
}

/// Keeps neurons occurring in more than `τ₃` of the per-query sets.
pub fn aggregate_relation(
    relation: &str,
    per_query: &[Vec<NeuronId>],
    tau3_factor: f64,
    rule: NTotalRule,
) -> Result<RelationDkn> {
    if !(0.0..=1.0).contains(&tau3_factor) {
        return Err(Error::arg(format!("tau3 factor {tau3_factor} must be in [0, 1]")));
    }
    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    let mut contributing = 0;
    for set in per_query {
        let uniq: BTreeSet<NeuronId> = set.iter().copied().collect();
        contributing += usize::from(!uniq.is_empty());
        for n in uniq {
            *counts.entry(n).or_default() += 1;
        }
    }
    if contributing == 0 {
        return Err(Error::arg(format!("relation {relation}: every per-query neuron set is empty")));
    }
    let n_total = match rule {
        NTotalRule::UnionSize => counts.len(),
        NTotalRule::QueryCount => contributing,
    };
    let tau3 = tau3_factor * n_total as f64;
    let neurons = counts.iter().filter(|(_, &c)| c as f64 > tau3).map(|(&n, _)| n).collect();
    Ok(RelationDkn { relation: relation.to_string(), neurons, counts, n_total, tau3, rule })
}

/// A query with a candidate answer and whether that pairing is true.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub query: Vec<TokenId>,
    pub candidate: TokenId,
    pub gold_answer: TokenId,
    pub gold: bool,
}

/// Interleaves each true record with a corrupted copy whose candidate is a
/// different answer drawn uniformly from the relation's pool.
pub fn corrupt_answers(
    queries: &[(Vec<TokenId>, TokenId)],
    pool: &[TokenId],
    seed: u64,
    relation: &str,
) -> Result<Vec<CheckRecord>> {
    let distinct: BTreeSet<TokenId> = pool.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::arg(format!("relation {relation} has fewer than two distinct answers")));
    }
    let pool: Vec<TokenId> = distinct.into_iter().collect();
    let mut rng = rng::substream(seed, &format!("corrupt/{relation}"));
    let mut out = Vec::with_capacity(2 * queries.len());
    for (q, a) in queries {
        let others: Vec<TokenId> = pool.iter().copied().filter(|c| c != a).collect();
        let wrong = others[rng.random_range(0..others.len())];
        out.push(CheckRecord { query: q.clone(), candidate: *a, gold_answer: *a, gold: true });
        out.push(CheckRecord { query: q.clone(), candidate: wrong, gold_answer: *a, gold: false });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactLabel {
    pub query: Vec<TokenId>,
    pub candidate: TokenId,
    pub gold: bool,
    pub predicted: bool,
    pub mean_score: f64,
    /// No neuron had positive attribution for this candidate; score taken as 0.
    pub no_signal: bool,
}

/// Mean normalized attribution of `neurons` for the record's candidate answer.
pub fn check_score(
    model: &ToyTransformer,
    record: &CheckRecord,
    neurons: &[NeuronId],
    steps: usize,
) -> Result<(f64, bool)> {
    if neurons.is_empty() {
        return Err(Error::arg("fact-check neuron set is empty"));
    }
    match attribute_all(model, &record.query, record.candidate, steps) {
        Ok(a) => Ok((a.mean_score(neurons)?, false)),
        Err(Error::NoAttributableSignal) => Ok((0.0, true)),
        Err(e) => Err(e),
    }
}

pub fn fact_check(
    model: &ToyTransformer,
    record: &CheckRecord,
    neurons: &[NeuronId],
    tau4: f64,
    steps: usize,
) -> Result<FactLabel> {
    let (mean_score, no_signal) = check_score(model, record, neurons, steps)?;
    Ok(label(record, mean_score, no_signal, tau4))
}

pub fn label(record: &CheckRecord, mean_score: f64, no_signal: bool, tau4: f64) -> FactLabel {
    FactLabel {
        query: record.query.clone(),
        candidate: record.candidate,
        gold: record.gold,
        predicted: mean_score > tau4,
        mean_score,
        no_signal,
    }
}

/// Scores records in parallel, each against its own neuron set; records
/// with an empty set get `None`.
pub fn score_records(
    model: &ToyTransformer,
    records: &[CheckRecord],
    sets: &[Vec<NeuronId>],
    steps: usize,
) -> Result<Vec<Option<(f64, bool)>>> {
    if records.len() != sets.len() {
        return Err(Error::arg("one neuron set per record required"));
    }
    records
        .par_iter()
        .zip(sets)
        .map(|(r, ns)| if ns.is_empty() { Ok(None) } else { check_score(model, r, ns, steps).map(Some) })
        .collect()
}

/// Attribution of each record's candidate answer, `None` when no neuron
/// attributes positively. Lets several neuron sets share one attribution pass.
pub fn record_attributions(
    model: &ToyTransformer,
    records: &[CheckRecord],
    steps: usize,
) -> Result<Vec<Option<AttributionResult>>> {
    records
        .par_iter()
        .map(|r| match attribute_all(model, &r.query, r.candidate, steps) {
            Ok(a) => Ok(Some(a)),
            Err(Error::NoAttributableSignal) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

pub fn evaluate_prf(pairs: impl IntoIterator<Item = (bool, bool)>) -> Result<Prf> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (gold, pred) in pairs {
        match (gold, pred) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fp + fn_ + tn == 0 {
        return Err(Error::arg("no labels to evaluate"));
    }
    let mut zero_division = false;
    let mut ratio = |a: usize, b: usize| {
        if b == 0 {
            zero_division = true;
            0.0
        } else {
            a as f64 / b as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { precision, recall, f1, tp, fp, fn_, tn, zero_division })
}

pub fn labels_prf(labels: &[FactLabel]) -> Result<Prf> {
    evaluate_prf(labels.iter().map(|l| (l.gold, l.predicted)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau4 {
    pub tau4: f64,
    pub f1: f64,
    /// Every calibration score was identical.
    pub degenerate: bool,
}

/// Picks the threshold maximizing F1 over `candidates` evenly spaced values
/// spanning the observed scores. Ties go to the smallest threshold.
pub fn calibrate_tau4(scored: &[(f64, bool)], candidates: usize) -> Result<Tau4> {
    if scored.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    if candidates < 2 {
        return Err(Error::arg("need at least two tau4 candidates"));
    }
    let lo = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("calibration score".into()));
    }
    if lo == hi {
        let f1 = evaluate_prf(scored.iter().map(|&(s, g)| (g, s > lo)))?.f1;
        return Ok(Tau4 { tau4: lo, f1, degenerate: true });
    }
    let mut best = Tau4 { tau4: lo, f1: -1.0, degenerate: false };
    for k in 0..candidates {
        let t = lo + (hi - lo) * k as f64 / (candidates - 1) as f64;
        let f1 = evaluate_prf(scored.iter().map(|&(s, g)| (g, s > t)))?.f1;
        if f1 > best.f1 {
            best = Tau4 { tau4: t, f1, degenerate: false };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(p: usize) -> NeuronId {
        NeuronId::new(0, p)
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b) = split_relation(&items, 0.5, 3, "r").unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_relation(&items, 0.5, 3, "r").unwrap(), (a, b));
        assert!(split_relation(&items[..3], 0.5, 3, "r").is_err());
    }

    #[test]
    fn tau3_rules() {
        // ten distinct neurons; n(0) appears in 8 of 9 sets
        let mut sets: Vec<Vec<NeuronId>> = (0..8).map(|i| vec![n(0), n(1 + i)]).collect();
        sets.push(vec![n(9)]);
        let r = aggregate_relation("r", &sets, 0.7, NTotalRule::UnionSize).unwrap();
        assert_eq!(r.n_total, 10);
        assert!((r.tau3 - 7.0).abs() < 1e-12);
        assert_eq!(r.neurons, vec![n(0)]);
        let all = aggregate_relation("r", &sets, 0.0, NTotalRule::UnionSize).unwrap();
        assert_eq!(all.neurons.len(), 10);
        let q = aggregate_relation("r", &sets, 0.7, NTotalRule::QueryCount).unwrap();
        assert_eq!(q.n_total, 9);
        assert_eq!(q.neurons, vec![n(0)]);
        assert!(aggregate_relation("r", &[vec![]], 0.7, NTotalRule::UnionSize).is_err());
    }

    #[test]
    fn corruption_is_balanced_and_wrong() {
        let qs = vec![(vec![5, 6], 10), (vec![5, 7], 11), (vec![5, 8], 10)];
        let recs = corrupt_answers(&qs, &[10, 11], 0, "r").unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs.iter().filter(|r| r.gold).count(), 3);
        for pair in recs.chunks(2) {
            assert!(pair[0].gold && !pair[1].gold);
            assert_ne!(pair[1].candidate, pair[1].gold_answer);
            assert_eq!(pair[1].candidate, if pair[0].candidate == 10 { 11 } else { 10 });
        }
        assert!(corrupt_answers(&qs, &[10, 10], 0, "r").is_err());
    }

    #[test]
    fn prf_arithmetic() {
        let p = evaluate_prf([(true, true), (false, true), (true, false)]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let p = evaluate_prf([(true, true), (false, false)]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = evaluate_prf([(true, false), (false, false)]).unwrap();
        assert!(p.zero_division);
        assert_eq!(p.f1, 0.0);
        assert!(evaluate_prf([]).is_err());
    }

    #[test]
    fn calibration_on_separable_scores() {
        let scored = [(0.1, false), (0.2, false), (0.6, true), (0.9, true)];
        let t = calibrate_tau4(&scored, TAU4_CANDIDATES).unwrap();
        assert_eq!(t.f1, 1.0);
        // grid step is 0.008 from 0.1, so the first separating point is 0.204
        assert!((t.tau4 - 0.204).abs() < 1e-12, "{}", t.tau4);
        let flat = calibrate_tau4(&[(0.3, true), (0.3, false)], TAU4_CANDIDATES).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.tau4, 0.3);
    }

    #[test]
    fn threshold_label() {
        let r = CheckRecord { query: vec![1], candidate: 2, gold_answer: 2, gold: true };
        assert!(label(&r, 0.6, false, 0.5).predicted);
        assert!(label(&r, 1e-9, false, 0.0).predicted);
        assert!(!label(&r, 0.5, false, 0.5).predicted);
    }
}
