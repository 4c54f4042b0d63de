//! Fact records, the TempLama-style JSONL wire format, and the synthetic
//! fact world the toy models are trained on.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::{EOS, RESERVED};
use crate::model::{TokenId, Vocab};
use crate::rng;

pub const BLANK: &str = "_X_";

/// One fact instance: a cloze query with a single blank, its answer, and
/// optionally the date the answer holds for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub relation: String,
    #[serde(default)]
    pub date: Option<String>,
    pub query: String,
    #[serde(deserialize_with = "answer_name")]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<usize>,
}

/// Accepts a bare string or the `[{"name": ...}, ...]` list used by TempLama
/// exports (first entry wins).
fn answer_name<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    struct Named {
        name: String,
    }
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Plain(String),
        List(Vec<Named>),
    }
    match Wire::deserialize(d)? {
        Wire::Plain(s) => Ok(s),
        Wire::List(v) => {
            v.into_iter().next().map(|n| n.name).ok_or_else(|| serde::de::Error::custom("answer list is empty"))
        }
    }
}

impl FactRecord {
    pub fn validate(&self) -> Result<()> {
        if self.query.matches(BLANK).count() != 1 {
            return Err(Error::Dataset(format!("query {:?} must contain exactly one {BLANK}", self.query)));
        }
        if self.answer.split_whitespace().count() != 1 {
            return Err(Error::Dataset(format!("answer {:?} must be a single token", self.answer)));
        }
        Ok(())
    }

    /// The text the model continues: optional date prefix plus the query up
    /// to the blank.
    pub fn prompt(&self) -> String {
        let head = self.query.split(BLANK).next().unwrap_or_default().trim();
        match &self.date {
            Some(d) => format!("in {d} {head}"),
            None => head.to_string(),
        }
    }

    /// Full training line: prompt, answer, end of sequence.
    pub fn line(&self) -> String {
        format!("{} {} {EOS}", self.prompt(), self.answer)
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<(Vec<TokenId>, TokenId)> {
        let q = vocab.encode(&self.prompt())?;
        let a = vocab
            .id(&self.answer)
            .ok_or_else(|| Error::Dataset(format!("answer {:?} not in vocabulary", self.answer)))?;
        Ok((q, a))
    }

    /// Identifier stable across runs: relation, subject/query and date.
    pub fn id(&self) -> String {
        let who = self.subject.clone().unwrap_or_else(|| self.query.clone());
        match &self.date {
            Some(d) => format!("{}:{}@{}", self.relation, who, d),
            None => format!("{}:{}", self.relation, who),
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FactRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Sentence patterns; `{s}` is the subject, `{r}` the relation word.
const TEMPLATES: [&str; 6] = [
    "the {r} of {s} is _X_",
    "{s} has the {r} _X_",
    "for {s} the {r} is _X_",
    "{s} 's {r} is _X_",
    "we know {s} {r} _X_",
    "as for {r} {s} gives _X_",
];

fn fill(template: &str, relation: &str, subject: &str) -> String {
    template.replace("{r}", relation).replace("{s}", subject)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_relations: usize,
    pub n_subjects: usize,
    /// Size of each relation's answer pool.
    pub n_answers: usize,
    pub templates_per_relation: usize,
    /// Answer changes per updated fact (each adds one dated version).
    pub timestamp_updates: usize,
    /// Fraction of facts that receive updates.
    pub update_fraction: f64,
    /// Fraction of updated facts whose newest version is held out of
    /// pretraining (these form the new-knowledge set).
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_relations: 4,
            n_subjects: 40,
            n_answers: 8,
            templates_per_relation: 3,
            timestamp_updates: 1,
            update_fraction: 0.3,
            held_out_fraction: 0.5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations == 0 || self.n_subjects == 0 || self.n_answers == 0 || self.templates_per_relation == 0 {
            return Err(Error::Config("corpus counts must all be >= 1".into()));
        }
        if self.templates_per_relation > TEMPLATES.len() {
            return Err(Error::Config(format!("at most {} templates per relation", TEMPLATES.len())));
        }
        if self.timestamp_updates > 0 && self.n_answers < 2 {
            return Err(Error::Config("updates need at least two answers per relation".into()));
        }
        for f in [self.update_fraction, self.held_out_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Everything generated for one synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    /// Every pretraining sequence, one record per line.
    pub pretrain: Vec<FactRecord>,
    /// Canonical-template queries for every fact version seen in pretraining.
    pub known: Vec<FactRecord>,
    /// Held-out newest versions of updated facts (canonical template).
    pub q_new: Vec<FactRecord>,
    /// The same held-out facts in a paraphrase template.
    pub q_au: Vec<FactRecord>,
    pub answer_pools: BTreeMap<String, Vec<String>>,
}

fn year(version: usize) -> String {
    (2019 + 2 * version).to_string()
}

pub fn relation_name(r: usize) -> String {
    format!("rel{r}")
}

/// Builds a synthetic world deterministically from `spec.seed`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, rng::CORPUS);
    let mut pretrain = Vec::new();
    let mut known = Vec::new();
    let mut q_new = Vec::new();
    let mut q_au = Vec::new();
    let mut answer_pools = BTreeMap::new();

    for r in 0..spec.n_relations {
        let rel = relation_name(r);
        let pool: Vec<String> = (0..spec.n_answers).map(|a| format!("{rel}_a{a}")).collect();
        if let Some(bad) = pool.iter().find(|a| RESERVED.contains(&a.as_str())) {
            return Err(Error::Dataset(format!("answer {bad} collides with a reserved token")));
        }
        let mut templates: Vec<usize> = (0..TEMPLATES.len()).collect();
        templates.shuffle(&mut rng);
        templates.truncate(spec.templates_per_relation);
        templates.sort_unstable();
        let canonical = templates[0];
        let paraphrase = *templates.get(1).unwrap_or(&canonical);

        for s in 0..spec.n_subjects {
            let subj = format!("s{s}");
            let updated = spec.timestamp_updates > 0 && rng.random_bool(spec.update_fraction);
            let held_out = updated && rng.random_bool(spec.held_out_fraction);
            let versions = if updated { spec.timestamp_updates + 1 } else { 1 };
            let mut answer = rng.random_range(0..spec.n_answers);
            for v in 0..versions {
                if v > 0 {
                    let shift = rng.random_range(1..spec.n_answers);
                    answer = (answer + shift) % spec.n_answers;
                }
                let record = |t: usize| FactRecord {
                    relation: rel.clone(),
                    date: Some(year(v)),
                    query: fill(TEMPLATES[t], &rel, &subj),
                    answer: pool[answer].clone(),
                    subject: Some(subj.clone()),
                    template: Some(t),
                };
                if held_out && v + 1 == versions {
                    q_new.push(record(canonical));
                    q_au.push(record(paraphrase));
                } else {
                    known.push(record(canonical));
                    pretrain.extend(templates.iter().map(|&t| record(t)));
                }
            }
        }
        answer_pools.insert(rel, pool);
    }

    let lines: Vec<String> = pretrain.iter().chain(&q_new).chain(&q_au).map(FactRecord::line).collect();
    let mut vocab_lines: Vec<&str> = lines.iter().map(String::as_str).collect();
    let pool_words: Vec<&str> = answer_pools.values().flatten().map(String::as_str).collect();
    vocab_lines.extend(pool_words);
    let vocab = Vocab::build(vocab_lines)?;
    Ok(SyntheticWorld { spec: spec.clone(), vocab, pretrain, known, q_new, q_au, answer_pools })
}

impl SyntheticWorld {
    pub fn corpus_text(&self) -> String {
        let mut s = String::new();
        for r in &self.pretrain {
            s.push_str(&r.line());
            s.push('\n');
        }
        s
    }

    /// Tokenized pretraining sequences.
    pub fn pretrain_tokens(&self) -> Result<Vec<Vec<TokenId>>> {
        self.pretrain.iter().map(|r| self.vocab.encode(&r.line())).collect()
    }

    /// Longest line (in tokens) the model must handle, including perturbation slack.
    pub fn max_line_tokens(&self) -> usize {
        self.pretrain.iter().chain(&self.q_au).map(|r| r.line().split_whitespace().count()).max().unwrap_or(0)
    }

    /// Writes `corpus.txt`, `vocab.json` and the fact splits as JSONL.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("corpus.txt"), self.corpus_text())?;
        fs::write(dir.join("vocab.json"), serde_json::to_vec_pretty(&self.vocab)?)?;
        fs::write(dir.join("world.json"), serde_json::to_vec(self)?)?;
        write_jsonl(&dir.join("known.jsonl"), &self.known)?;
        write_jsonl(&dir.join("q_new.jsonl"), &self.q_new)?;
        write_jsonl(&dir.join("q_au.jsonl"), &self.q_au)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join("world.json"))?)?)
    }
}
