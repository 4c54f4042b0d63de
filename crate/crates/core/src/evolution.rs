//! Where fine-tuning moves weights, and fine-tuning restricted to chosen
//! neurons.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FactRecord;
use crate::error::{Error, Result};
use crate::model::{
    greedy_next, train, FreezeMask, InterventionPlan, NeuronId, NeuronWeights, TokenId, ToyTransformer,
    TrainHyperParams, Vocab,
};

pub const SMALL_TAU_DELTA_FACTOR: f64 = 0.04;
pub const LARGE_TAU_DELTA_FACTOR: f64 = 0.05;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_change(before: &[f64], after: &[f64], n: NeuronId) -> Result<f64> {
    let diff: Vec<f64> = before.iter().zip(after).map(|(a, b)| b - a).collect();
    let (d, b) = (norm(&diff), norm(before));
    if b == 0.0 {
        if d == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::NonFinite(format!("relative change of {n}: weights were zero before fine-tuning")));
    }
    Ok(d / b)
}

/// Per-neuron relative change of the input column and output row, combined
/// as a Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    pub n_layers: usize,
    pub d_ff: usize,
    /// Layer-major, indexed like `layer * d_ff + pos`.
    pub values: Vec<f64>,
}

impl ParamDelta {
    pub fn get(&self, n: NeuronId) -> f64 {
        self.values[n.layer * self.d_ff + n.pos]
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        let ff = self.d_ff;
        self.values.iter().enumerate().map(move |(i, &v)| (NeuronId::new(i / ff, i % ff), v))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn param_delta<A: NeuronWeights + ?Sized, B: NeuronWeights + ?Sized>(before: &A, after: &B) -> Result<ParamDelta> {
    if (before.n_layers(), before.d_ff(), before.d_model()) != (after.n_layers(), after.d_ff(), after.d_model()) {
        return Err(Error::arg("param_delta needs models of identical shape"));
    }
    let mut values = Vec::with_capacity(before.n_layers() * before.d_ff());
    for l in 0..before.n_layers() {
        for p in 0..before.d_ff() {
            let n = NeuronId::new(l, p);
            let fc = relative_change(&before.w_fc_column(n), &after.w_fc_column(n), n)?;
            let proj = relative_change(&before.w_proj_row(n), &after.w_proj_row(n), n)?;
            values.push((fc * fc + proj * proj).sqrt());
        }
    }
    Ok(ParamDelta { n_layers: before.n_layers(), d_ff: before.d_ff(), values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangedSet {
    pub neurons: Vec<NeuronId>,
    pub tau: f64,
    /// Every delta was zero.
    pub all_zero: bool,
}

/// Neurons whose change is strictly above `factor × max ΔP`.
pub fn changed_set(delta: &ParamDelta, factor: f64) -> Result<ChangedSet> {
    if delta.values.is_empty() {
        return Err(Error::arg("empty parameter delta"));
    }
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::arg(format!("tau factor {factor} must be finite and >= 0")));
    }
    let max = delta.max();
    let tau = factor * max;
    let neurons = delta.iter().filter(|&(_, v)| v > tau).map(|(n, _)| n).collect();
    Ok(ChangedSet { neurons, tau, all_zero: max == 0.0 })
}

/// Share of `dkn` that also lies in `changed`.
pub fn overlap(dkn: &[NeuronId], changed: &ChangedSet) -> Result<f64> {
    let d: BTreeSet<NeuronId> = dkn.iter().copied().collect();
    if d.is_empty() {
        return Err(Error::arg("overlap of an empty neuron set"));
    }
    let c: BTreeSet<NeuronId> = changed.neurons.iter().copied().collect();
    Ok(d.intersection(&c).count() as f64 / d.len() as f64)
}

/// Query sets for a knowledge update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveDatasets {
    pub q_new: Vec<FactRecord>,
    pub q_old: Vec<FactRecord>,
    pub q_au: Vec<FactRecord>,
}

impl EvolveDatasets {
    pub fn validate(&self) -> Result<()> {
        let key = |r: &FactRecord| (r.relation.clone(), r.date.clone(), r.prompt());
        let new: BTreeSet<_> = self.q_new.iter().map(key).collect();
        if let Some(r) = self.q_old.iter().find(|r| new.contains(&key(r))) {
            return Err(Error::Dataset(format!("Q_old query {:?} also appears in Q_new", r.prompt())));
        }
        if self.q_au.len() != self.q_new.len() {
            return Err(Error::Dataset(format!("|Q_au| = {} but |Q_new| = {}", self.q_au.len(), self.q_new.len())));
        }
        for (a, n) in self.q_au.iter().zip(&self.q_new) {
            if a.answer != n.answer || a.relation != n.relation || a.subject != n.subject {
                return Err(Error::Dataset(format!("Q_au item {:?} does not paraphrase {:?}", a.prompt(), n.prompt())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Dkn,
    Kn,
    RandomMatched,
    All,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::Dkn, MaskKind::Kn, MaskKind::RandomMatched, MaskKind::All];

    pub fn label(self) -> &'static str {
        match self {
            MaskKind::Dkn => "dkn",
            MaskKind::Kn => "kn",
            MaskKind::RandomMatched => "random_matched",
            MaskKind::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub q_new: f64,
    pub q_old: f64,
    pub q_au: f64,
}

pub fn accuracy(model: &ToyTransformer, records: &[FactRecord], vocab: &Vocab) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::arg("accuracy over an empty set"));
    }
    let encoded: Vec<(Vec<TokenId>, TokenId)> = records.iter().map(|r| r.encode(vocab)).collect::<Result<_>>()?;
    let none = InterventionPlan::new();
    let hits: Vec<bool> =
        encoded.par_iter().map(|(q, a)| greedy_next(model, q, &none).map(|p| p == *a)).collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub fn evaluate(model: &ToyTransformer, data: &EvolveDatasets, vocab: &Vocab) -> Result<AccuracyTriple> {
    Ok(AccuracyTriple {
        q_new: accuracy(model, &data.q_new, vocab)?,
        q_old: accuracy(model, &data.q_old, vocab)?,
        q_au: accuracy(model, &data.q_au, vocab)?,
    })
}

pub fn mask_for(kind: MaskKind, model: &ToyTransformer, neurons: &[NeuronId]) -> Result<FreezeMask> {
    match kind {
        MaskKind::All => Ok(FreezeMask::all(model.config())),
        _ if neurons.is_empty() => Err(Error::arg(format!("empty neuron mask for {}", kind.label()))),
        _ => Ok(FreezeMask::neurons_only(neurons.iter().copied())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub kind: MaskKind,
    pub trainable_neurons: usize,
    pub before: AccuracyTriple,
    pub after: AccuracyTriple,
    pub final_loss: Option<f64>,
}

/// Fine-tunes on the Q_new lines with only the MLP weights of `neurons`
/// trainable (every parameter for `All`) and scores all three sets.
pub fn freeze_finetune_eval(
    model: &ToyTransformer,
    kind: MaskKind,
    neurons: &[NeuronId],
    data: &EvolveDatasets,
    vocab: &Vocab,
    hp: &TrainHyperParams,
) -> Result<(ToyTransformer, FinetuneOutcome)> {
    data.validate()?;
    let mask = mask_for(kind, model, neurons)?;
    let lines: Vec<Vec<TokenId>> = data.q_new.iter().map(|r| vocab.encode(&r.line())).collect::<Result<_>>()?;
    let before = evaluate(model, data, vocab)?;
    let (tuned, report) = train(model, &lines, hp, &mask)?;
    let after = evaluate(&tuned, data, vocab)?;
    let trainable_neurons =
        if kind == MaskKind::All { model.config().neuron_count() } else { mask.trainable_neurons.len() };
    Ok((tuned, FinetuneOutcome { kind, trainable_neurons, before, after, final_loss: report.losses.last().copied() }))
}
