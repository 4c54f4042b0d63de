//! Persistence and probability filtering of filtration clusters, and the
//! end-to-end localization pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filtration::{merge_tree, Bdc, MergeTree};
use super::graph::{build_distance_graph, DistanceGraph};
use super::inf_as_null;
use crate::attribution::{attribute_all, select_kns, AttributionResult, KnSet, KnThreshold, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::model::{predict_prob, InterventionPlan, NeuronId, TokenId, ToyTransformer, ValueEdit};

pub const DEFAULT_TAU1_FACTOR: f64 = 0.5;
pub const DEFAULT_TAU2: f64 = 0.3;

/// What to do when one surviving cluster contains another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NestedPolicy {
    /// Keep every survivor (the result is a nested family).
    KeepAll,
    /// Drop survivors that strictly contain another survivor, leaving
    /// pairwise-disjoint components.
    Innermost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtcParams {
    pub tau1_factor: f64,
    pub tau2: f64,
    pub nested: NestedPolicy,
}

impl Default for NtcParams {
    fn default() -> Self {
        NtcParams { tau1_factor: DEFAULT_TAU1_FACTOR, tau2: DEFAULT_TAU2, nested: NestedPolicy::Innermost }
    }
}

impl NtcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1_factor > 0.0 && self.tau1_factor <= 1.0) {
            return Err(Error::arg(format!("tau1 factor {} outside (0, 1]", self.tau1_factor)));
        }
        if !(0.0..=1.0).contains(&self.tau2) {
            return Err(Error::arg(format!("tau2 {} outside [0, 1]", self.tau2)));
        }
        Ok(())
    }
}

/// Persistence used for the τ₁ comparison. Clusters that never die are
/// capped at the largest finite death radius; if nothing ever dies, at the
/// largest birth radius.
pub fn capped_persistences(bdcs: &[Bdc]) -> Vec<f64> {
    let cap = bdcs
        .iter()
        .filter(|b| b.death.is_finite())
        .map(|b| b.death)
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))))
        .unwrap_or_else(|| bdcs.iter().map(|b| b.birth).fold(0.0, f64::max));
    bdcs.iter().map(|b| if b.is_final() { cap } else { b.persistence() }).collect()
}

/// τ₁ = factor × the largest finite persistence. When no cluster ever dies,
/// the capped values stand in so the threshold stays defined.
pub fn tau1(bdcs: &[Bdc], factor: f64) -> f64 {
    let finite = bdcs
        .iter()
        .filter(|b| !b.is_final())
        .map(Bdc::persistence)
        .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
    let max = finite.unwrap_or_else(|| capped_persistences(bdcs).into_iter().fold(0.0, f64::max));
    factor * max
}

/// Indices of the clusters passing both gates (persistence strictly above τ₁,
/// retention at least τ₂), after applying the nesting policy.
pub fn select_bdcs(bdcs: &[Bdc], retention: &[f64], params: &NtcParams) -> Vec<usize> {
    let capped = capped_persistences(bdcs);
    let t1 = tau1(bdcs, params.tau1_factor);
    let pass: Vec<usize> = (0..bdcs.len()).filter(|&i| capped[i] > t1 && retention[i] >= params.tau2).collect();
    match params.nested {
        NestedPolicy::KeepAll => pass,
        NestedPolicy::Innermost => pass
            .iter()
            .copied()
            .filter(|&i| {
                !pass
                    .iter()
                    .any(|&j| j != i && bdcs[j].members.len() < bdcs[i].members.len() && bdcs[i].contains_all(&bdcs[j]))
            })
            .collect(),
    }
}

/// Answer probability with every knowledge neuron outside `members` zeroed.
pub fn activate_only(
    model: &ToyTransformer,
    members: &[NeuronId],
    kns: &[NeuronId],
    query: &[TokenId],
    answer: TokenId,
) -> Result<f64> {
    let mut plan = InterventionPlan::new();
    for &n in kns {
        if !members.contains(&n) {
            plan.add_value(n, ValueEdit::Zero)?;
        }
    }
    predict_prob(model, query, answer, &plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBdc {
    pub members: Vec<NeuronId>,
    pub birth: f64,
    #[serde(with = "inf_as_null")]
    pub death: f64,
    #[serde(with = "inf_as_null")]
    pub persistence: f64,
    pub capped_persistence: f64,
    /// Prob(cluster alone) / Prob(all knowledge neurons).
    pub retention: f64,
}

/// Where the pipeline stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Located,
    NoAttributableSignal,
    NoKnowledgeNeurons,
    NoClusters,
    Filtered,
}

/// The degenerate knowledge neurons of one fact: surviving clusters sorted by
/// birth radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DknSet {
    #[serde(default)]
    pub fact: Option<String>,
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub bdcs: Vec<ScoredBdc>,
    pub tau1_factor: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub prob_full: f64,
    pub candidates: usize,
    pub stage: Stage,
}

impl DknSet {
    pub fn empty(query: &[TokenId], answer: TokenId, params: &NtcParams, stage: Stage) -> Self {
        DknSet {
            fact: None,
            query: query.to_vec(),
            answer,
            bdcs: vec![],
            tau1_factor: params.tau1_factor,
            tau1: 0.0,
            tau2: params.tau2,
            prob_full: 0.0,
            candidates: 0,
            stage,
        }
    }

    pub fn len(&self) -> usize {
        self.bdcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bdcs.is_empty()
    }

    /// Sorted union of all member neurons.
    pub fn neurons(&self) -> Vec<NeuronId> {
        let mut v: Vec<NeuronId> = self.bdcs.iter().flat_map(|b| b.members.iter().copied()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Filters filtration clusters by persistence and retention ratio.
pub fn ntc_filter(
    bdcs: &[Bdc],
    model: &ToyTransformer,
    kns: &KnSet,
    query: &[TokenId],
    answer: TokenId,
    params: &NtcParams,
) -> Result<DknSet> {
    params.validate()?;
    for b in bdcs {
        if let Some(m) = b.members.iter().find(|m| !kns.contains(**m)) {
            return Err(Error::arg(format!("cluster member {m} is not a knowledge neuron")));
        }
    }
    if bdcs.is_empty() {
        return Ok(DknSet::empty(query, answer, params, Stage::NoClusters));
    }
    let prob_full = predict_prob(model, query, answer, &InterventionPlan::new())?;
    let retention: Vec<f64> = bdcs
        .par_iter()
        .map(|b| activate_only(model, &b.members, &kns.neurons, query, answer).map(|p| p / prob_full))
        .collect::<Result<_>>()?;
    let capped = capped_persistences(bdcs);
    let keep = select_bdcs(bdcs, &retention, params);
    let out: Vec<ScoredBdc> = keep
        .iter()
        .map(|&i| ScoredBdc {
            members: bdcs[i].members.clone(),
            birth: bdcs[i].birth,
            death: bdcs[i].death,
            persistence: bdcs[i].persistence(),
            capped_persistence: capped[i],
            retention: retention[i],
        })
        .collect();
    Ok(DknSet {
        fact: None,
        query: query.to_vec(),
        answer,
        stage: if out.is_empty() { Stage::Filtered } else { Stage::Located },
        bdcs: out,
        tau1_factor: params.tau1_factor,
        tau1: tau1(bdcs, params.tau1_factor),
        tau2: params.tau2,
        prob_full,
        candidates: bdcs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocateParams {
    pub steps: usize,
    pub kn_threshold: KnThreshold,
    pub ntc: NtcParams,
}

impl Default for LocateParams {
    fn default() -> Self {
        LocateParams { steps: DEFAULT_STEPS, kn_threshold: KnThreshold::default(), ntc: NtcParams::default() }
    }
}

/// Every intermediate of one localization run.
#[derive(Debug, Clone)]
pub struct Localization {
    pub attribution: Option<AttributionResult>,
    pub kns: Option<KnSet>,
    pub graph: Option<DistanceGraph>,
    pub tree: Option<MergeTree>,
    pub dkn: DknSet,
}

/// attribution → knowledge neurons → distance graph → filtration → filter.
pub fn locate_dkns(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    params: &LocateParams,
) -> Result<Localization> {
    params.ntc.validate()?;
    params.kn_threshold.validate()?;
    let attribution = match attribute_all(model, query, answer, params.steps) {
        Ok(a) => a,
        Err(Error::NoAttributableSignal) => {
            return Ok(Localization {
                attribution: None,
                kns: None,
                graph: None,
                tree: None,
                dkn: DknSet::empty(query, answer, &params.ntc, Stage::NoAttributableSignal),
            })
        }
        Err(e) => return Err(e),
    };
    let kns = select_kns(&attribution, params.kn_threshold.resolve(&attribution));
    if kns.is_empty() {
        return Ok(Localization {
            attribution: Some(attribution),
            kns: Some(kns),
            graph: None,
            tree: None,
            dkn: DknSet::empty(query, answer, &params.ntc, Stage::NoKnowledgeNeurons),
        });
    }
    let graph = build_distance_graph(model, &kns.neurons)?;
    let tree = merge_tree(&graph);
    let dkn = ntc_filter(&tree.bdcs(), model, &kns, query, answer, &params.ntc)?;
    Ok(Localization { attribution: Some(attribution), kns: Some(kns), graph: Some(graph), tree: Some(tree), dkn })
}
