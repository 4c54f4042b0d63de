//! End-to-end experiment drivers shared by the CLI and the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::corpus::{FactRecord, SyntheticWorld};
use crate::error::{Error, Result};
use crate::evolution::{
    changed_set, freeze_finetune_eval, overlap, param_delta, ChangedSet, EvolveDatasets, FinetuneOutcome, MaskKind,
    ParamDelta, LARGE_TAU_DELTA_FACTOR, SMALL_TAU_DELTA_FACTOR,
};
use crate::factcheck::{
    aggregate_relation, calibrate_tau4, corrupt_answers, evaluate_prf, record_attributions, split_relation,
    CheckRecord, NTotalRule, Prf, DEFAULT_SPLIT_RATIO, DEFAULT_TAU3_FACTOR, TAU4_CANDIDATES,
};
use crate::intervention::{
    baseline_neurons, delta_prob, enhance_eval, plan_for_neurons, subset_sweep, BaselineKind, SuppressionMode,
    SweepReport, EXCLUSION_DELTA,
};
use crate::model::{
    greedy_next, predict_prob, train, FreezeMask, InterventionPlan, ModelConfig, NeuronId, Optimizer, TokenId,
    ToyTransformer, TrainHyperParams, TrainReport,
};
use crate::perturbation::{harvest_errors, perturbation_for};
use crate::topology::{locate_dkns, DknSet, Localization, LocateParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Small,
    Large,
}

impl ModelSize {
    pub fn config(self, vocab_size: usize, seed: u64) -> ModelConfig {
        match self {
            ModelSize::Small => ModelConfig::small(vocab_size, seed),
            ModelSize::Large => ModelConfig::large(vocab_size, seed),
        }
    }

    /// Factor of the changed-neuron threshold for this size.
    pub fn tau_delta_factor(self) -> f64 {
        match self {
            ModelSize::Small => SMALL_TAU_DELTA_FACTOR,
            ModelSize::Large => LARGE_TAU_DELTA_FACTOR,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelSize::Small => "small",
            ModelSize::Large => "large",
        }
    }
}

/// Trains a fresh model of `size` on the world's pretraining lines. `seed`
/// drives both initialization and batch order.
pub fn train_world(
    world: &SyntheticWorld,
    size: ModelSize,
    seed: u64,
    hp: &TrainHyperParams,
) -> Result<(ToyTransformer, TrainReport)> {
    let cfg = size.config(world.vocab.len(), seed);
    if world.max_line_tokens() + 1 > cfg.max_seq {
        return Err(Error::Config(format!(
            "corpus lines need {} tokens (plus one for perturbations) but max_seq is {}",
            world.max_line_tokens(),
            cfg.max_seq
        )));
    }
    let init = ToyTransformer::init(cfg)?;
    let hp = TrainHyperParams { seed, ..hp.clone() };
    train(&init, &world.pretrain_tokens()?, &hp, &FreezeMask::all(&cfg))
}

/// One fact with its knowledge neurons and degenerate knowledge neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedFact {
    pub record: FactRecord,
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub kns: Vec<NeuronId>,
    pub dkn: DknSet,
}

/// Localizes one record, keeping the intermediates (graph, merge tree).
pub fn locate_record(
    model: &ToyTransformer,
    record: &FactRecord,
    world: &SyntheticWorld,
    params: &LocateParams,
) -> Result<(LocatedFact, Localization)> {
    let (query, answer) = record.encode(&world.vocab)?;
    let mut loc = locate_dkns(model, &query, answer, params)?;
    loc.dkn.fact = Some(record.id());
    let kns = loc.kns.as_ref().map(|k| k.neurons.clone()).unwrap_or_default();
    let fact = LocatedFact { record: record.clone(), query, answer, kns, dkn: loc.dkn.clone() };
    Ok((fact, loc))
}

pub fn locate_records(
    model: &ToyTransformer,
    records: &[FactRecord],
    world: &SyntheticWorld,
    params: &LocateParams,
) -> Result<Vec<LocatedFact>> {
    records.iter().map(|r| locate_record(model, r, world, params).map(|(f, _)| f)).collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracySummary {
    pub mode: SuppressionMode,
    pub facts: usize,
    /// Facts with at least two clusters.
    pub multi: usize,
    /// Multi-cluster facts whose aggregates survived exclusion.
    pub used: usize,
    pub flagged: usize,
    pub mean_partial: Option<f64>,
    pub mean_full: Option<f64>,
    /// Share of used facts whose largest step is the final one.
    pub jump_fraction: Option<f64>,
    pub cardinality_histogram: BTreeMap<usize, usize>,
    pub reports: Vec<SweepReport>,
}

pub fn degeneracy(
    model: &ToyTransformer,
    facts: &[LocatedFact],
    mode: SuppressionMode,
    seed: u64,
) -> Result<DegeneracySummary> {
    let mut hist = BTreeMap::new();
    let mut reports = Vec::new();
    for f in facts {
        *hist.entry(f.dkn.len()).or_insert(0) += 1;
        if f.dkn.len() >= 2 {
            reports.push(subset_sweep(model, &f.dkn, &f.query, f.answer, mode, seed)?);
        }
    }
    let (mut partial, mut full, mut jumps) = (vec![], vec![], vec![]);
    for r in &reports {
        if let (Some(p), Some(fu), Some(j)) = (r.partial_mean, r.full, r.last_point_jump()) {
            partial.push(p);
            full.push(fu);
            jumps.push(if j { 1.0 } else { 0.0 });
        }
    }
    Ok(DegeneracySummary {
        mode,
        facts: facts.len(),
        multi: reports.len(),
        used: partial.len(),
        flagged: reports.iter().filter(|r| r.flagged).count(),
        mean_partial: mean(&partial),
        mean_full: mean(&full),
        jump_fraction: mean(&jumps),
        cardinality_histogram: hist,
        reports,
    })
}

/// Whose neurons an intervention touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Dkn,
    Kn,
    Random,
    None,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Dkn, Arm::Kn, Arm::Random, Arm::None];
}

fn arm_neurons(model: &ToyTransformer, fact: &LocatedFact, arm: Arm, seed: u64, index: usize) -> Result<Vec<NeuronId>> {
    let dkn = fact.dkn.neurons();
    match arm {
        Arm::Dkn => Ok(dkn),
        Arm::Kn => baseline_neurons(BaselineKind::Kns, model, &dkn, &fact.kns, seed, index as u64),
        Arm::Random => baseline_neurons(BaselineKind::RandomMatched, model, &dkn, &fact.kns, seed, index as u64),
        Arm::None => baseline_neurons(BaselineKind::None, model, &dkn, &fact.kns, seed, index as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustRow {
    pub fact: String,
    pub arm: Arm,
    /// Clean query under the suppression.
    pub prob_q: f64,
    /// Perturbed query under the suppression.
    pub prob_q_star: f64,
    /// Clean query, unedited model.
    pub prob_q_unedited: f64,
    /// Drop from the clean to the perturbed query, both under the suppression.
    pub delta: f64,
    /// Drop from the unedited clean query to the suppressed perturbed query.
    pub delta_vs_unedited: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressSummary {
    pub mode: SuppressionMode,
    pub facts: usize,
    /// Facts dropped because some arm crossed the exclusion threshold.
    pub excluded: usize,
    pub mean_delta: BTreeMap<Arm, f64>,
    pub mean_delta_vs_unedited: BTreeMap<Arm, f64>,
    pub rows: Vec<RobustRow>,
}

/// Suppresses each arm's neurons and compares clean and perturbed queries.
/// Facts without degenerate knowledge neurons are skipped.
pub fn robustness_suppress(
    model: &ToyTransformer,
    facts: &[LocatedFact],
    mode: SuppressionMode,
    seed: u64,
) -> Result<SuppressSummary> {
    let none = InterventionPlan::new();
    let mut rows = Vec::new();
    let mut excluded = 0;
    let mut used = 0;
    for (i, f) in facts.iter().enumerate() {
        if f.dkn.is_empty() {
            continue;
        }
        let q_star = perturbation_for(&f.query, seed, i)?.perturbed;
        let p0 = predict_prob(model, &f.query, f.answer, &none)?;
        let mut fact_rows = Vec::new();
        for arm in Arm::ALL {
            let neurons = arm_neurons(model, f, arm, seed, i)?;
            let plan = plan_for_neurons(&neurons, mode, model)?.plan;
            let pq = predict_prob(model, &f.query, f.answer, &plan)?;
            let ps = predict_prob(model, &q_star, f.answer, &plan)?;
            fact_rows.push(RobustRow {
                fact: f.record.id(),
                arm,
                prob_q: pq,
                prob_q_star: ps,
                prob_q_unedited: p0,
                delta: delta_prob(pq, ps)?,
                delta_vs_unedited: delta_prob(p0, ps)?,
            });
        }
        if fact_rows.iter().any(|r| r.delta > EXCLUSION_DELTA || r.delta_vs_unedited > EXCLUSION_DELTA) {
            excluded += 1;
            continue;
        }
        used += 1;
        rows.extend(fact_rows);
    }
    let per_arm = |get: fn(&RobustRow) -> f64| {
        Arm::ALL
            .iter()
            .filter_map(|&a| {
                let v: Vec<f64> = rows.iter().filter(|r| r.arm == a).map(get).collect();
                mean(&v).map(|m| (a, m))
            })
            .collect::<BTreeMap<_, _>>()
    };
    Ok(SuppressSummary {
        mode,
        facts: used,
        excluded,
        mean_delta: per_arm(|r| r.delta),
        mean_delta_vs_unedited: per_arm(|r| r.delta_vs_unedited),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceSummary {
    pub mode: SuppressionMode,
    /// Size of the harvested error set.
    pub errors: usize,
    pub acc_err: BTreeMap<Arm, f64>,
}

/// Harvests perturbed queries the model gets wrong, then scales each arm's
/// neurons for the matching fact and measures how many become right.
pub fn robustness_enhance(
    model: &ToyTransformer,
    facts: &[LocatedFact],
    mode: SuppressionMode,
    seed: u64,
) -> Result<EnhanceSummary> {
    let queries: Vec<(Vec<TokenId>, TokenId)> = facts.iter().map(|f| (f.query.clone(), f.answer)).collect();
    let errs = harvest_errors(model, &queries, seed)?;
    let mut acc_err = BTreeMap::new();
    if errs.is_empty() {
        return Ok(EnhanceSummary { mode, errors: 0, acc_err });
    }
    for arm in Arm::ALL {
        let mut hits = 0.0;
        for e in &errs {
            let neurons = arm_neurons(model, &facts[e.index], arm, seed, e.index)?;
            hits += enhance_eval(model, &neurons, &[(e.query.perturbed.clone(), e.answer)], mode)?;
        }
        acc_err.insert(arm, hits / errs.len() as f64);
    }
    Ok(EnhanceSummary { mode, errors: errs.len(), acc_err })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactCheckConfig {
    pub tau3_factor: f64,
    pub n_total: NTotalRule,
    pub split_ratio: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for FactCheckConfig {
    fn default() -> Self {
        FactCheckConfig {
            tau3_factor: DEFAULT_TAU3_FACTOR,
            n_total: NTotalRule::default(),
            split_ratio: DEFAULT_SPLIT_RATIO,
            steps: crate::attribution::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Dkn,
    Kn,
    /// The model's own greedy answer compared against the candidate.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Relation,
    Golden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCheckMetrics {
    pub method: CheckMethod,
    pub mode: CheckMode,
    pub prf: Prf,
    pub tau4: Option<f64>,
    pub calibration_f1: Option<f64>,
    /// Test records with no neuron set to score (predicted false).
    pub undecided: usize,
    pub test_records: usize,
    /// Relation-level neuron counts (relation mode only).
    pub relation_sizes: BTreeMap<String, usize>,
}

struct SplitRecords {
    records: Vec<CheckRecord>,
    /// Index into the located facts of the record's true fact.
    fact: Vec<usize>,
    relation: Vec<String>,
}

fn corrupted_split(
    facts: &[LocatedFact],
    idx: &[usize],
    world: &SyntheticWorld,
    relation: &str,
    seed: u64,
    tag: &str,
) -> Result<SplitRecords> {
    let pool: Vec<TokenId> = world
        .answer_pools
        .get(relation)
        .ok_or_else(|| Error::Dataset(format!("no answer pool for relation {relation}")))?
        .iter()
        .map(|a| world.vocab.id(a).ok_or_else(|| Error::Dataset(format!("answer {a} not in vocabulary"))))
        .collect::<Result<_>>()?;
    let queries: Vec<(Vec<TokenId>, TokenId)> =
        idx.iter().map(|&i| (facts[i].query.clone(), facts[i].answer)).collect();
    let records = corrupt_answers(&queries, &pool, seed, &format!("{relation}/{tag}"))?;
    let fact = idx.iter().flat_map(|&i| [i, i]).collect();
    Ok(SplitRecords { relation: vec![relation.to_string(); records.len()], records, fact })
}

fn append(a: &mut SplitRecords, b: SplitRecords) {
    a.records.extend(b.records);
    a.fact.extend(b.fact);
    a.relation.extend(b.relation);
}

/// Relation-level and per-fact ("golden") fact checking with knowledge-neuron
/// and degenerate-knowledge-neuron sets, plus the model's own answer as a
/// reference.
pub fn fact_check_experiment(
    model: &ToyTransformer,
    world: &SyntheticWorld,
    facts: &[LocatedFact],
    cfg: &FactCheckConfig,
) -> Result<Vec<FactCheckMetrics>> {
    let mut by_rel: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, f) in facts.iter().enumerate() {
        by_rel.entry(f.record.relation.clone()).or_default().push(i);
    }
    let empty = || SplitRecords { records: vec![], fact: vec![], relation: vec![] };
    let (mut calib, mut test) = (empty(), empty());
    let mut rel_sets: BTreeMap<(CheckMethod, String), Vec<NeuronId>> = BTreeMap::new();
    for (rel, idx) in &by_rel {
        let (r1, r2) = split_relation(idx, cfg.split_ratio, cfg.seed, rel)?;
        for method in [CheckMethod::Dkn, CheckMethod::Kn] {
            let sets: Vec<Vec<NeuronId>> = r1
                .iter()
                .map(|&i| if method == CheckMethod::Dkn { facts[i].dkn.neurons() } else { facts[i].kns.clone() })
                .collect();
            let neurons = match aggregate_relation(rel, &sets, cfg.tau3_factor, cfg.n_total) {
                Ok(r) => r.neurons,
                Err(Error::InvalidArgument(_)) => vec![],
                Err(e) => return Err(e),
            };
            rel_sets.insert((method, rel.clone()), neurons);
        }
        append(&mut calib, corrupted_split(facts, &r1, world, rel, cfg.seed, "calibration")?);
        append(&mut test, corrupted_split(facts, &r2, world, rel, cfg.seed, "test")?);
    }

    let calib_attr = record_attributions(model, &calib.records, cfg.steps)?;
    let test_attr = record_attributions(model, &test.records, cfg.steps)?;
    let mut out = Vec::new();
    for method in [CheckMethod::Dkn, CheckMethod::Kn] {
        for mode in [CheckMode::Relation, CheckMode::Golden] {
            let golden: Vec<Vec<NeuronId>> = facts
                .iter()
                .map(|f| if method == CheckMethod::Dkn { f.dkn.neurons() } else { f.kns.clone() })
                .collect();
            let pick = |split: &SplitRecords, k: usize| -> Vec<NeuronId> {
                match mode {
                    CheckMode::Relation => rel_sets[&(method, split.relation[k].clone())].clone(),
                    CheckMode::Golden => golden[split.fact[k]].clone(),
                }
            };
            let score = |split: &SplitRecords, attr: &[Option<AttributionResult>]| -> Result<Vec<Option<f64>>> {
                (0..split.records.len())
                    .map(|k| {
                        let set = pick(split, k);
                        if set.is_empty() {
                            return Ok(None);
                        }
                        match &attr[k] {
                            Some(a) => a.mean_score(&set).map(Some),
                            None => Ok(Some(0.0)),
                        }
                    })
                    .collect()
            };
            let cal_scores = score(&calib, &calib_attr)?;
            let cal: Vec<(f64, bool)> =
                cal_scores.iter().zip(&calib.records).filter_map(|(s, r)| s.map(|v| (v, r.gold))).collect();
            let tau = if cal.is_empty() { None } else { Some(calibrate_tau4(&cal, TAU4_CANDIDATES)?) };
            let test_scores = score(&test, &test_attr)?;
            let undecided = test_scores.iter().filter(|s| s.is_none()).count();
            let prf = evaluate_prf(test.records.iter().zip(&test_scores).map(|(r, s)| {
                let pred = matches!((s, tau), (Some(v), Some(t)) if *v > t.tau4);
                (r.gold, pred)
            }))?;
            let relation_sizes = match mode {
                CheckMode::Relation => {
                    by_rel.keys().map(|rel| (rel.clone(), rel_sets[&(method, rel.clone())].len())).collect()
                }
                CheckMode::Golden => BTreeMap::new(),
            };
            out.push(FactCheckMetrics {
                method,
                mode,
                prf,
                tau4: tau.map(|t| t.tau4),
                calibration_f1: tau.map(|t| t.f1),
                undecided,
                test_records: test.records.len(),
                relation_sizes,
            });
        }
    }

    let none = InterventionPlan::new();
    let mut pairs = Vec::new();
    for r in &test.records {
        pairs.push((r.gold, greedy_next(model, &r.query, &none)? == r.candidate));
    }
    out.push(FactCheckMetrics {
        method: CheckMethod::Model,
        mode: CheckMode::Relation,
        prf: evaluate_prf(pairs)?,
        tau4: None,
        calibration_f1: None,
        undecided: 0,
        test_records: test.records.len(),
        relation_sizes: BTreeMap::new(),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub finetune: TrainHyperParams,
    /// Changed-neuron threshold factor; the size default when absent.
    pub tau_delta_factor: Option<f64>,
    pub seed: u64,
    /// Learning rate of an extra plain-gradient-descent fine-tune whose
    /// changed set is reported next to the Adam one.
    #[serde(default)]
    pub sgd_diagnostic_lr: Option<f64>,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            finetune: TrainHyperParams { steps: 200, ..TrainHyperParams::default() },
            tau_delta_factor: None,
            seed: 0,
            sgd_diagnostic_lr: Some(0.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveSummary {
    pub tau_delta_factor: f64,
    pub tau_delta: f64,
    pub changed: usize,
    pub dkn_neurons: Vec<NeuronId>,
    pub kn_neurons: Vec<NeuronId>,
    pub random_neurons: Vec<NeuronId>,
    pub overlap: BTreeMap<MaskKind, f64>,
    /// Smallest, median and largest ΔP under unrestricted fine-tuning.
    pub delta_quantiles: [f64; 3],
    pub sgd_diagnostic: Option<SgdDiagnostic>,
    pub outcomes: Vec<FinetuneOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdDiagnostic {
    pub learning_rate: f64,
    pub changed: usize,
    pub overlap: BTreeMap<MaskKind, f64>,
    pub delta_quantiles: [f64; 3],
}

fn quantiles(delta: &ParamDelta) -> [f64; 3] {
    let mut v = delta.values.clone();
    v.sort_by(f64::total_cmp);
    [v[0], v[v.len() / 2], v[v.len() - 1]]
}

fn overlaps(sets: &[(MaskKind, &[NeuronId])], changed: &ChangedSet) -> Result<BTreeMap<MaskKind, f64>> {
    let mut out = BTreeMap::new();
    for (kind, set) in sets {
        if !set.is_empty() {
            out.insert(*kind, overlap(set, changed)?);
        }
    }
    Ok(out)
}

pub fn evolve_datasets(world: &SyntheticWorld) -> EvolveDatasets {
    EvolveDatasets { q_new: world.q_new.clone(), q_old: world.known.clone(), q_au: world.q_au.clone() }
}

/// Locates neurons for the new facts, measures where unrestricted
/// fine-tuning moves weights, and fine-tunes under each mask.
pub fn evolve_experiment(
    model: &ToyTransformer,
    world: &SyntheticWorld,
    size: ModelSize,
    locate: &LocateParams,
    cfg: &EvolveConfig,
) -> Result<EvolveSummary> {
    let data = evolve_datasets(world);
    data.validate()?;
    let located = locate_records(model, &data.q_new, world, locate)?;
    let union = |f: &dyn Fn(&LocatedFact) -> Vec<NeuronId>| -> Vec<NeuronId> {
        located.iter().flat_map(f).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let dkn_neurons = union(&|f| f.dkn.neurons());
    let kn_neurons = union(&|f| f.kns.clone());
    if dkn_neurons.is_empty() {
        return Err(Error::arg("no degenerate knowledge neurons found for the new facts"));
    }
    let random_neurons = baseline_neurons(BaselineKind::RandomMatched, model, &dkn_neurons, &kn_neurons, cfg.seed, 0)?;
    let hp = TrainHyperParams { seed: cfg.seed, ..cfg.finetune.clone() };

    let mut outcomes = Vec::new();
    let mut tuned_all = None;
    for kind in MaskKind::ALL {
        let neurons: &[NeuronId] = match kind {
            MaskKind::Dkn => &dkn_neurons,
            MaskKind::Kn => &kn_neurons,
            MaskKind::RandomMatched => &random_neurons,
            MaskKind::All => &[],
        };
        let (tuned, outcome) = freeze_finetune_eval(model, kind, neurons, &data, &world.vocab, &hp)?;
        if kind == MaskKind::All {
            tuned_all = Some(tuned);
        }
        outcomes.push(outcome);
    }
    let tuned_all = tuned_all.expect("All is always run");
    let factor = cfg.tau_delta_factor.unwrap_or(size.tau_delta_factor());
    let sets = [
        (MaskKind::Dkn, dkn_neurons.as_slice()),
        (MaskKind::Kn, kn_neurons.as_slice()),
        (MaskKind::RandomMatched, random_neurons.as_slice()),
    ];
    let delta = param_delta(model, &tuned_all)?;
    let changed = changed_set(&delta, factor)?;
    let ov = overlaps(&sets, &changed)?;
    let sgd_diagnostic = match cfg.sgd_diagnostic_lr {
        Some(lr) => {
            let sgd = TrainHyperParams { learning_rate: lr, optimizer: Optimizer::Sgd, ..hp.clone() };
            let lines: Vec<Vec<TokenId>> =
                data.q_new.iter().map(|r| world.vocab.encode(&r.line())).collect::<Result<_>>()?;
            let (tuned, _) = train(model, &lines, &sgd, &FreezeMask::all(model.config()))?;
            let d = param_delta(model, &tuned)?;
            let c = changed_set(&d, factor)?;
            Some(SgdDiagnostic {
                learning_rate: lr,
                changed: c.neurons.len(),
                overlap: overlaps(&sets, &c)?,
                delta_quantiles: quantiles(&d),
            })
        }
        None => None,
    };
    Ok(EvolveSummary {
        tau_delta_factor: factor,
        tau_delta: changed.tau,
        changed: changed.neurons.len(),
        dkn_neurons,
        kn_neurons,
        random_neurons,
        overlap: ov,
        delta_quantiles: quantiles(&delta),
        sgd_diagnostic,
        outcomes,
    })
}
