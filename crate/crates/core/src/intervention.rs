//! Suppression and enhancement experiments: the ΔProb metric, subset sweeps
//! over a fact's clusters, and matched random baselines.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    greedy_next, predict_prob, InterventionPlan, NeuronId, NeuronWeights, TokenId, ToyTransformer, ValueEdit,
};
use crate::rng;
use crate::topology::DknSet;

/// Rows whose ΔProb exceeds this are treated as facts the model never knew.
pub const EXCLUSION_DELTA: f64 = 900.0;
/// Largest cluster count swept exhaustively.
pub const SUBSET_GUARD: usize = 12;
/// Random subsets drawn (on top of singletons and leave-one-outs) past the guard.
pub const SAMPLED_SUBSETS: usize = 256;

/// Percentage drop from `before` to `after`; negative when the probability rises.
pub fn delta_prob(before: f64, after: f64) -> Result<f64> {
    if before <= 0.0 || !before.is_finite() || !after.is_finite() {
        return Err(Error::arg(format!("delta_prob needs a positive reference probability (got {before})")));
    }
    Ok(100.0 * (before - after) / before)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuppressionMode {
    ZeroValues,
    NullEdges,
    ScaleValues { factor: f64 },
    ScaleEdges { factor: f64 },
}

impl SuppressionMode {
    pub fn label(&self) -> String {
        match self {
            SuppressionMode::ZeroValues => "zero_values".into(),
            SuppressionMode::NullEdges => "null_edges".into(),
            SuppressionMode::ScaleValues { factor } => format!("scale_values_{factor}"),
            SuppressionMode::ScaleEdges { factor } => format!("scale_edges_{factor}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SuppressionMode::ScaleValues { factor } | SuppressionMode::ScaleEdges { factor } = *self {
            if !factor.is_finite() || factor < 0.0 {
                return Err(Error::arg(format!("scale factor {factor} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// A plan plus a note when an edge mode found nothing to edit.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedEdit {
    pub plan: InterventionPlan,
    pub warning: Option<String>,
}

/// Edits for the union of `neurons`. Value modes touch every neuron; edge
/// modes touch every adjacent-layer pair whose pathway weight is non-zero
/// (exactly the pairs at finite adjacent distance).
pub fn plan_for_neurons<W: NeuronWeights + ?Sized>(
    neurons: &[NeuronId],
    mode: SuppressionMode,
    weights: &W,
) -> Result<PlannedEdit> {
    mode.validate()?;
    let set: BTreeSet<NeuronId> = neurons.iter().copied().collect();
    let mut plan = InterventionPlan::new();
    match mode {
        SuppressionMode::ZeroValues | SuppressionMode::ScaleValues { .. } => {
            let edit = match mode {
                SuppressionMode::ScaleValues { factor } => ValueEdit::Scale { factor },
                _ => ValueEdit::Zero,
            };
            for &n in &set {
                plan.add_value(n, edit)?;
            }
            Ok(PlannedEdit { plan, warning: None })
        }
        SuppressionMode::NullEdges | SuppressionMode::ScaleEdges { .. } => {
            let gain = match mode {
                SuppressionMode::ScaleEdges { factor } => factor,
                _ => 0.0,
            };
            for &a in &set {
                for &b in set.range(NeuronId::new(a.layer + 1, 0)..NeuronId::new(a.layer + 2, 0)) {
                    if weights.pathway_weight(a, b) != 0.0 {
                        plan.set_edge(a, b, gain)?;
                    }
                }
            }
            let warning = (!set.is_empty() && plan.is_empty())
                .then(|| "no adjacent-layer pairs among the selected neurons; plan is empty".to_string());
            Ok(PlannedEdit { plan, warning })
        }
    }
}

/// Edits for the union of the given clusters' members.
pub fn plan_for_bdcs<W: NeuronWeights + ?Sized>(
    bdcs: &[&[NeuronId]],
    mode: SuppressionMode,
    weights: &W,
) -> Result<PlannedEdit> {
    let members: Vec<NeuronId> = bdcs.iter().flat_map(|b| b.iter().copied()).collect();
    plan_for_neurons(&members, mode, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Character `i` is `1` when cluster `i` is suppressed.
    pub mask: String,
    pub size: usize,
    pub mode: String,
    pub prob: f64,
    pub delta_prob: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub fact: Option<String>,
    pub cardinality: usize,
    pub mode: SuppressionMode,
    pub prob_before: f64,
    pub rows: Vec<SweepRow>,
    /// True when the power set was too large and subsets were sampled.
    pub sampled: bool,
    /// True when some row crossed the exclusion threshold.
    pub flagged: bool,
    /// Mean ΔProb over surviving rows with 1..s-1 clusters suppressed.
    pub partial_mean: Option<f64>,
    /// ΔProb with every cluster suppressed (absent if excluded).
    pub full: Option<f64>,
    /// Mean ΔProb per number of suppressed clusters, index 0 = none (0.0).
    pub by_size: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    /// Aggregates evaluated rows of an `s`-cluster sweep, marking rows above
    /// the exclusion threshold.
    pub fn from_rows(
        fact: Option<String>,
        s: usize,
        mode: SuppressionMode,
        prob_before: f64,
        mut rows: Vec<SweepRow>,
        sampled: bool,
        mut warnings: Vec<String>,
    ) -> Self {
        for r in &mut rows {
            r.excluded = r.delta_prob > EXCLUSION_DELTA;
        }
        warnings.sort();
        warnings.dedup();
        let mean = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
        let partial_mean = mean(rows.iter().filter(|r| !r.excluded && r.size < s).map(|r| r.delta_prob).collect());
        let full = rows.iter().find(|r| r.size == s && !r.excluded).map(|r| r.delta_prob);
        let mut by_size = vec![Some(0.0)];
        for k in 1..=s {
            by_size.push(mean(rows.iter().filter(|r| !r.excluded && r.size == k).map(|r| r.delta_prob).collect()));
        }
        SweepReport {
            fact,
            cardinality: s,
            mode,
            prob_before,
            flagged: rows.iter().any(|r| r.excluded),
            rows,
            sampled,
            partial_mean,
            full,
            by_size,
            warnings,
        }
    }

    /// Whether the step into full suppression is the largest step of the
    /// ΔProb-versus-count curve (strictly larger than every earlier step).
    pub fn last_point_jump(&self) -> Option<bool> {
        let s = self.cardinality;
        if s < 2 {
            return None;
        }
        let series: Option<Vec<f64>> = self.by_size.iter().copied().collect();
        let series = series?;
        let last = series[s] - series[s - 1];
        Some((1..s).all(|k| last > series[k] - series[k - 1]))
    }

    /// CSV: one line per subset.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fact,mask,size,mode,prob,delta_prob,excluded\n");
        let fact = self.fact.clone().unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fact, r.mask, r.size, r.mode, r.prob, r.delta_prob, r.excluded
            ));
        }
        out
    }
}

fn subsets(s: usize, seed: u64) -> Result<(Vec<Vec<bool>>, bool)> {
    if s == 0 {
        return Err(Error::arg("sweep over an empty cluster set"));
    }
    if s <= SUBSET_GUARD {
        let all = (1u32..(1 << s)).map(|m| (0..s).map(|i| m >> i & 1 == 1).collect()).collect();
        return Ok((all, false));
    }
    let mut set: BTreeSet<Vec<bool>> = BTreeSet::new();
    for i in 0..s {
        set.insert((0..s).map(|j| j == i).collect());
        set.insert((0..s).map(|j| j != i).collect());
    }
    set.insert(vec![true; s]);
    let mut rng = rng::substream(seed, "subset-sample");
    let mut draws = 0;
    while draws < SAMPLED_SUBSETS {
        let m: Vec<bool> = (0..s).map(|_| rng.random_bool(0.5)).collect();
        if m.iter().any(|&b| b) {
            set.insert(m);
            draws += 1;
        }
    }
    Ok((set.into_iter().collect(), true))
}

/// Suppresses every non-empty subset of the fact's clusters and records ΔProb.
pub fn subset_sweep(
    model: &ToyTransformer,
    dkn: &DknSet,
    query: &[TokenId],
    answer: TokenId,
    mode: SuppressionMode,
    seed: u64,
) -> Result<SweepReport> {
    let s = dkn.len();
    let (mut masks, sampled) = subsets(s, seed)?;
    masks.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    let before = predict_prob(model, query, answer, &InterventionPlan::new())?;
    let evaluated: Vec<(SweepRow, Option<String>)> = masks
        .par_iter()
        .map(|mask| {
            let chosen: Vec<&[NeuronId]> =
                (0..s).filter(|&i| mask[i]).map(|i| dkn.bdcs[i].members.as_slice()).collect();
            let planned = plan_for_bdcs(&chosen, mode, model)?;
            let after = predict_prob(model, query, answer, &planned.plan)?;
            let d = delta_prob(before, after)?;
            Ok((
                SweepRow {
                    mask: mask.iter().map(|&b| if b { '1' } else { '0' }).collect(),
                    size: chosen.len(),
                    mode: mode.label(),
                    prob: after,
                    delta_prob: d,
                    excluded: false,
                },
                planned.warning,
            ))
        })
        .collect::<Result<_>>()?;
    let warnings: Vec<String> = evaluated.iter().filter_map(|(_, w)| w.clone()).collect();
    let rows: Vec<SweepRow> = evaluated.into_iter().map(|(r, _)| r).collect();
    Ok(SweepReport::from_rows(dkn.fact.clone(), s, mode, before, rows, sampled, warnings))
}

/// Fraction of `err_queries` answered correctly (greedy top-1) once `neurons`
/// are edited by `mode`.
pub fn enhance_eval(
    model: &ToyTransformer,
    neurons: &[NeuronId],
    err_queries: &[(Vec<TokenId>, TokenId)],
    mode: SuppressionMode,
) -> Result<f64> {
    if err_queries.is_empty() {
        return Err(Error::arg("nothing to enhance: the error set is empty"));
    }
    let plan = plan_for_neurons(neurons, mode, model)?.plan;
    let hits: Vec<bool> =
        err_queries.par_iter().map(|(q, a)| greedy_next(model, q, &plan).map(|p| p == *a)).collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Kns,
    RandomMatched,
    None,
}

/// Comparison neuron sets. `RandomMatched` draws, without replacement and
/// outside `dkn_neurons`, as many neurons as `dkn_neurons` holds; `Kns`
/// returns `kns` as given. `index` separates draws for different facts.
pub fn baseline_neurons<W: NeuronWeights + ?Sized>(
    kind: BaselineKind,
    weights: &W,
    dkn_neurons: &[NeuronId],
    kns: &[NeuronId],
    seed: u64,
    index: u64,
) -> Result<Vec<NeuronId>> {
    match kind {
        BaselineKind::None => Ok(vec![]),
        BaselineKind::Kns => {
            let mut v = kns.to_vec();
            v.sort();
            v.dedup();
            Ok(v)
        }
        BaselineKind::RandomMatched => {
            let exclude: BTreeSet<NeuronId> = dkn_neurons.iter().copied().collect();
            let pool: Vec<NeuronId> = (0..weights.n_layers())
                .flat_map(|l| (0..weights.d_ff()).map(move |p| NeuronId::new(l, p)))
                .filter(|n| !exclude.contains(n))
                .collect();
            let k = exclude.len();
            if pool.len() < k {
                return Err(Error::arg(format!("cannot draw {k} random neurons from {} candidates", pool.len())));
            }
            let mut rng = rng::indexed(seed, rng::RANDOM_BASELINE, index);
            let mut v: Vec<NeuronId> = pool.into_iter().choose_multiple(&mut rng, k);
            v.sort();
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_prob_formula() {
        assert_eq!(delta_prob(0.5, 0.25).unwrap(), 50.0);
        assert_eq!(delta_prob(0.3, 0.3).unwrap(), 0.0);
        assert!((delta_prob(0.4, 0.6).unwrap() + 50.0).abs() < 1e-12);
        assert!(delta_prob(0.0, 0.1).is_err());
    }

    #[test]
    fn exhaustive_and_sampled_subsets() {
        let (all, sampled) = subsets(3, 0).unwrap();
        assert_eq!(all.len(), 7);
        assert!(!sampled);
        let (some, sampled) = subsets(13, 0).unwrap();
        assert!(sampled);
        assert!(some.contains(&vec![true; 13]));
        assert!(some.len() >= 2 * 13 + 1);
        assert!(subsets(0, 0).is_err());
    }

    #[test]
    fn jump_detection() {
        let mut r = SweepReport {
            fact: None,
            cardinality: 2,
            mode: SuppressionMode::ZeroValues,
            prob_before: 0.9,
            rows: vec![],
            sampled: false,
            flagged: false,
            partial_mean: Some(5.0),
            full: Some(40.0),
            by_size: vec![Some(0.0), Some(5.0), Some(40.0)],
            warnings: vec![],
        };
        assert_eq!(r.last_point_jump(), Some(true));
        r.by_size = vec![Some(0.0), Some(30.0), Some(40.0)];
        assert_eq!(r.last_point_jump(), Some(false));
        r.by_size = vec![Some(0.0), None, Some(40.0)];
        assert_eq!(r.last_point_jump(), None);
    }
}
