use std::collections::BTreeMap;

use anyhow::Result;
use serde::Serialize;

use dkn_core::config::check_published_hyperparams;
use dkn_core::corpus::gen_corpus;
use dkn_core::evolution::MaskKind;
use dkn_core::experiments::{
    degeneracy, evolve_experiment, fact_check_experiment, locate_record, robustness_enhance, robustness_suppress,
    train_world, Arm, CheckMethod, CheckMode, ModelSize,
};
use dkn_core::model::io::save_model;
use dkn_core::perturbation::harvest_errors;
use dkn_core::topology::Stage;

use crate::run::{csv, Lab, Outputs};

/// Headline numbers of one suite run, keyed by metric name.
pub type Metrics = BTreeMap<String, f64>;

pub fn gen_corpus_cmd(lab: &Lab) -> Result<()> {
    let world = gen_corpus(&lab.cfg.corpus)?;
    let mut out = Outputs::new(lab, "gen-corpus", None, lab.out().join("corpus"))?;
    world.write(out.dir())?;
    for f in ["corpus.txt", "vocab.json", "world.json", "known.jsonl", "q_new.jsonl", "q_au.jsonl"] {
        out.external(f);
    }
    out.json(
        "corpus_summary.json",
        &serde_json::json!({
            "vocab_size": world.vocab.len(),
            "pretrain_lines": world.pretrain.len(),
            "known": world.known.len(),
            "q_new": world.q_new.len(),
            "q_au": world.q_au.len(),
            "max_line_tokens": world.max_line_tokens(),
        }),
    )?;
    println!("corpus: {} known facts, {} new, vocab {}", world.known.len(), world.q_new.len(), world.vocab.len());
    out.finish()
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn train_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<()> {
    let world = lab.load_world()?;
    let (model, report) = train_world(&world, size, seed, &lab.cfg.train)?;
    let mut out = Outputs::new(lab, "train", Some(seed), lab.run_dir(size, seed))?;
    save_model(&model, &out.dir().join("model"), &format!("{}-seed{seed}", size.label()))?;
    out.external("model/manifest.json");
    out.external("model/weights.bin");
    let last = report.losses.last().copied();
    out.json("train_report.json", &serde_json::json!({ "size": size, "final_loss": last, "losses": report.losses }))?;
    if lab.figure_data {
        let rows: Vec<LossRow> = report.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
        out.text("figure_loss.csv", &csv(&rows)?)?;
    }
    println!("train {} seed {seed}: final loss {:.4}", size.label(), last.unwrap_or(f64::NAN));
    out.finish()
}

pub fn locate_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<()> {
    let world = lab.load_world()?;
    let model = lab.load_model(size, seed)?;
    let mut facts = Vec::with_capacity(world.known.len());
    let mut dendrograms = Vec::new();
    for r in &world.known {
        let (fact, loc) = locate_record(&model, r, &world, &lab.cfg.locate)?;
        if lab.dump_dendrogram {
            if let Some(tree) = &loc.tree {
                dendrograms.push(serde_json::json!({ "fact": r.id(), "dendrogram": tree.dendrogram() }));
            }
        }
        facts.push(fact);
    }
    let mut out = Outputs::new(lab, "locate", Some(seed), lab.run_dir(size, seed))?;
    out.jsonl("dkn.jsonl", &facts)?;
    if lab.dump_dendrogram {
        out.jsonl("dendrograms.jsonl", &dendrograms)?;
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut stages: BTreeMap<String, usize> = BTreeMap::new();
    for f in &facts {
        *histogram.entry(f.dkn.len()).or_default() += 1;
        *stages.entry(format!("{:?}", f.dkn.stage)).or_default() += 1;
    }
    let with_dkn = facts.iter().filter(|f| f.dkn.stage == Stage::Located && !f.dkn.is_empty()).count();
    out.json(
        "locate_summary.json",
        &serde_json::json!({
            "facts": facts.len(),
            "with_dkn": with_dkn,
            "cluster_count_histogram": histogram,
            "stages": stages,
            "mean_kns": facts.iter().map(|f| f.kns.len()).sum::<usize>() as f64 / facts.len().max(1) as f64,
        }),
    )?;
    println!("locate {} seed {seed}: {with_dkn}/{} facts with degenerate knowledge neurons", size.label(), facts.len());
    out.finish()
}

#[derive(Serialize)]
struct CurveRow {
    fact: String,
    mode: String,
    suppressed: usize,
    mean_delta_prob: Option<f64>,
}

pub fn sweep_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<Metrics> {
    let model = lab.load_model(size, seed)?;
    let facts = lab.load_facts(size, seed)?;
    let mut out = Outputs::new(lab, "sweep", Some(seed), lab.run_dir(size, seed).join("sweep"))?;
    let mut metrics = Metrics::new();
    for &mode in &lab.cfg.intervention.sweep_modes {
        let s = degeneracy(&model, &facts, mode, seed)?;
        let label = mode.label();
        let mut rows = String::new();
        for (i, r) in s.reports.iter().enumerate() {
            let body = r.to_csv();
            rows.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
        }
        if rows.is_empty() {
            rows = "fact,mask,size,mode,prob,delta_prob,excluded\n".into();
        }
        out.text(&format!("sweep_{label}.csv"), &rows)?;
        if lab.figure_data {
            let curve: Vec<CurveRow> = s
                .reports
                .iter()
                .flat_map(|r| {
                    let label = &label;
                    r.by_size.iter().enumerate().map(move |(k, v)| CurveRow {
                        fact: r.fact.clone().unwrap_or_default(),
                        mode: label.clone(),
                        suppressed: k,
                        mean_delta_prob: *v,
                    })
                })
                .collect();
            out.text(&format!("figure_degeneracy_{label}.csv"), &csv(&curve)?)?;
        }
        for (k, v) in [("mean_partial", s.mean_partial), ("mean_full", s.mean_full), ("jump_fraction", s.jump_fraction)]
        {
            if let Some(v) = v {
                metrics.insert(format!("{label}.{k}"), v);
            }
        }
        metrics.insert(format!("{label}.facts_used"), s.used as f64);
        println!(
            "sweep {} seed {seed} {label}: {} facts, partial {:?}, full {:?}, jump {:?}",
            size.label(),
            s.used,
            s.mean_partial,
            s.mean_full,
            s.jump_fraction
        );
        out.json(&format!("sweep_{label}.json"), &s)?;
    }
    out.finish()?;
    Ok(metrics)
}

pub fn perturb_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<Metrics> {
    let model = lab.load_model(size, seed)?;
    let facts = lab.load_facts(size, seed)?;
    let iv = &lab.cfg.intervention;
    let mut out = Outputs::new(lab, "perturb", Some(seed), lab.run_dir(size, seed).join("perturb"))?;
    let queries: Vec<_> = facts.iter().map(|f| (f.query.clone(), f.answer)).collect();
    let errs = harvest_errors(&model, &queries, seed)?;
    out.jsonl("err_queries.jsonl", &errs)?;
    let sup = robustness_suppress(&model, &facts, iv.suppress, seed)?;
    out.text("robustness_rows.csv", &csv(&sup.rows)?)?;
    let enh = robustness_enhance(&model, &facts, iv.enhance, seed)?;
    out.json("robustness.json", &serde_json::json!({ "suppress": sup, "enhance": enh }))?;
    let mut metrics = Metrics::new();
    for arm in Arm::ALL {
        let name = serde_json::to_value(arm)?.as_str().unwrap_or_default().to_string();
        if let Some(v) = sup.mean_delta.get(&arm) {
            metrics.insert(format!("suppress.{name}"), *v);
        }
        if let Some(v) = enh.acc_err.get(&arm) {
            metrics.insert(format!("enhance.{name}"), *v);
        }
    }
    metrics.insert("errors".into(), errs.len() as f64);
    println!(
        "perturb {} seed {seed}: {} facts, suppress {:?}, {} error queries, enhance {:?}",
        size.label(),
        sup.facts,
        sup.mean_delta,
        enh.errors,
        enh.acc_err
    );
    out.finish()?;
    Ok(metrics)
}

#[derive(Serialize)]
struct FactCheckRow {
    method: CheckMethod,
    mode: CheckMode,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
    zero_division: bool,
    tau4: Option<f64>,
    undecided: usize,
    test_records: usize,
}

pub fn factcheck_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<Metrics> {
    let world = lab.load_world()?;
    let model = lab.load_model(size, seed)?;
    let facts = lab.load_facts(size, seed)?;
    let cfg = dkn_core::experiments::FactCheckConfig { seed, ..lab.cfg.factcheck };
    let results = fact_check_experiment(&model, &world, &facts, &cfg)?;
    let mut out = Outputs::new(lab, "factcheck", Some(seed), lab.run_dir(size, seed).join("factcheck"))?;
    out.json("factcheck.json", &results)?;
    let rows: Vec<FactCheckRow> = results
        .iter()
        .map(|m| FactCheckRow {
            method: m.method,
            mode: m.mode,
            precision: m.prf.precision,
            recall: m.prf.recall,
            f1: m.prf.f1,
            tp: m.prf.tp,
            fp: m.prf.fp,
            fn_: m.prf.fn_,
            tn: m.prf.tn,
            zero_division: m.prf.zero_division,
            tau4: m.tau4,
            undecided: m.undecided,
            test_records: m.test_records,
        })
        .collect();
    out.text("factcheck.csv", &csv(&rows)?)?;
    let mut metrics = Metrics::new();
    for m in &results {
        let key = format!(
            "{}.{}.f1",
            serde_json::to_value(m.method)?.as_str().unwrap_or_default(),
            serde_json::to_value(m.mode)?.as_str().unwrap_or_default()
        );
        println!("factcheck {} seed {seed}: {key} = {:.3}", size.label(), m.prf.f1);
        metrics.insert(key, m.prf.f1);
    }
    out.finish()?;
    Ok(metrics)
}

#[derive(Serialize)]
struct OutcomeRow {
    mask: MaskKind,
    trainable_neurons: usize,
    before_q_new: f64,
    before_q_old: f64,
    before_q_au: f64,
    after_q_new: f64,
    after_q_old: f64,
    after_q_au: f64,
    final_loss: Option<f64>,
}

pub fn evolve_cmd(lab: &Lab, size: ModelSize, seed: u64) -> Result<Metrics> {
    let world = lab.load_world()?;
    let model = lab.load_model(size, seed)?;
    let cfg = dkn_core::experiments::EvolveConfig {
        seed,
        tau_delta_factor: Some(lab.cfg.evolve.tau_delta_factor.unwrap_or(size.tau_delta_factor())),
        ..lab.cfg.evolve.clone()
    };
    let e = evolve_experiment(&model, &world, size, &lab.cfg.locate, &cfg)?;
    let mut out = Outputs::new(lab, "evolve", Some(seed), lab.run_dir(size, seed).join("evolve"))?;
    out.json("evolve.json", &e)?;
    let rows: Vec<OutcomeRow> = e
        .outcomes
        .iter()
        .map(|o| OutcomeRow {
            mask: o.kind,
            trainable_neurons: o.trainable_neurons,
            before_q_new: o.before.q_new,
            before_q_old: o.before.q_old,
            before_q_au: o.before.q_au,
            after_q_new: o.after.q_new,
            after_q_old: o.after.q_old,
            after_q_au: o.after.q_au,
            final_loss: o.final_loss,
        })
        .collect();
    out.text("evolve_outcomes.csv", &csv(&rows)?)?;
    let mut metrics = Metrics::new();
    for (k, v) in &e.overlap {
        metrics.insert(format!("overlap.{}", k.label()), *v);
    }
    for o in &e.outcomes {
        metrics.insert(format!("{}.q_new", o.kind.label()), o.after.q_new);
        metrics.insert(format!("{}.q_old", o.kind.label()), o.after.q_old);
        metrics.insert(format!("{}.q_au", o.kind.label()), o.after.q_au);
    }
    metrics.insert("changed".into(), e.changed as f64);
    println!(
        "evolve {} seed {seed}: changed {}/{} (tau {:.4}), overlap {:?}",
        size.label(),
        e.changed,
        model.config().neuron_count(),
        e.tau_delta,
        e.overlap
    );
    out.finish()?;
    Ok(metrics)
}

pub const SUITES: [&str; 4] = ["sweep", "perturb", "factcheck", "evolve"];

#[derive(Serialize)]
struct CompareRow {
    experiment: String,
    size: ModelSize,
    seeds: usize,
    metrics: String,
}

/// Trains and localizes where needed, runs every suite on both sizes and
/// writes one averaged row per (suite, size).
pub fn compare_sizes_cmd(lab: &Lab) -> Result<()> {
    let mut table: Vec<(String, ModelSize, usize, Metrics)> = Vec::new();
    for size in [ModelSize::Small, ModelSize::Large] {
        let mut per_suite: BTreeMap<&str, Vec<Metrics>> = BTreeMap::new();
        for &seed in &lab.cfg.seeds {
            let run = lab.run_dir(size, seed);
            if !run.join("model/manifest.json").exists() {
                train_cmd(lab, size, seed)?;
            }
            if !run.join("dkn.jsonl").exists() {
                locate_cmd(lab, size, seed)?;
            }
            per_suite.entry("sweep").or_default().push(sweep_cmd(lab, size, seed)?);
            per_suite.entry("perturb").or_default().push(perturb_cmd(lab, size, seed)?);
            per_suite.entry("factcheck").or_default().push(factcheck_cmd(lab, size, seed)?);
            per_suite.entry("evolve").or_default().push(evolve_cmd(lab, size, seed)?);
        }
        for suite in SUITES {
            let runs = &per_suite[suite];
            table.push((suite.to_string(), size, runs.len(), average(runs)));
        }
    }
    let mut out = Outputs::new(lab, "compare-sizes", None, lab.out().to_path_buf())?;
    let rows: Vec<CompareRow> = table
        .iter()
        .map(|(experiment, size, seeds, m)| CompareRow {
            experiment: experiment.clone(),
            size: *size,
            seeds: *seeds,
            metrics: m.iter().map(|(k, v)| format!("{k}={v:.6}")).collect::<Vec<_>>().join(";"),
        })
        .collect();
    out.text("compare_sizes.csv", &csv(&rows)?)?;
    let json_rows: Vec<_> = table
        .iter()
        .map(|(experiment, size, seeds, m)| serde_json::json!({ "experiment": experiment, "size": size, "seeds": seeds, "metrics": m }))
        .collect();
    out.json("compare_sizes.json", &json_rows)?;
    println!("compare-sizes: {} rows", rows.len());
    out.finish()
}

/// Mean of each metric over the runs that reported it.
pub fn average(runs: &[Metrics]) -> Metrics {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for m in runs {
        for (k, v) in m {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

pub fn check_config_cmd(lab: &Lab) -> Result<()> {
    let checks = check_published_hyperparams(&lab.cfg);
    for c in &checks {
        println!("{} {} = {} (published {})", if c.ok { "ok  " } else { "DIFF" }, c.name, c.value, c.expected);
    }
    println!("config hash {}", lab.config_hash);
    Ok(())
}
