//! Integrated-gradient attribution over MLP neurons with an all-`<eos>`
//! baseline sentence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::EOS_ID;
use crate::model::{
    answer_prob_gradients, AnswerTail, InterventionPlan, NeuronId, TokenId, ToyTransformer, ValueEdit, Vocab,
};

pub const DEFAULT_STEPS: usize = 20;
/// Knowledge neurons are those scoring above this fraction of the top score.
pub const DEFAULT_KN_FACTOR: f64 = 0.2;

/// The baseline sentence: every position of `query` replaced by `<eos>`.
pub fn baseline_input(query: &[TokenId]) -> Result<Vec<TokenId>> {
    if query.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(vec![EOS_ID; query.len()])
}

/// Riemann form of the path integral:
/// `(actual / steps) * sum_{k=1..steps} grad(baseline + k/steps * (actual - baseline))`.
pub fn riemann_sum(actual: f64, baseline: f64, steps: usize, mut grad: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if steps == 0 {
        return Err(Error::arg("steps must be >= 1"));
    }
    let mut acc = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        acc += grad(baseline + alpha * (actual - baseline))?;
    }
    Ok(actual / steps as f64 * acc)
}

/// Last-position activations of every neuron on the baseline sentence.
fn baseline_activations(model: &ToyTransformer, query: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let base = baseline_input(query)?;
    let out = model.forward(&base, &InterventionPlan::new(), true)?;
    let trace = out.trace.expect("trace requested");
    let cfg = model.config();
    Ok((0..cfg.n_layers).map(|l| (0..cfg.d_ff).map(|p| trace.last(NeuronId::new(l, p))).collect()).collect())
}

/// Raw integrated-gradient score of one neuron, evaluated through full
/// forward/backward passes with an interpolation edit at every point.
pub fn integrated_gradient(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    neuron: NeuronId,
    steps: usize,
) -> Result<f64> {
    model.config().check_neuron(neuron)?;
    let w_base = baseline_activations(model, query)?[neuron.layer][neuron.pos];
    let actual = model.forward(query, &InterventionPlan::new(), true)?.trace.expect("trace requested").last(neuron);
    let ff = model.config().d_ff;
    let last = query.len() - 1;
    if steps == 0 {
        return Err(Error::arg("steps must be >= 1"));
    }
    let mut acc = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let plan = InterventionPlan::new().with_value(neuron, ValueEdit::Interpolate { alpha, baseline: w_base })?;
        let (_, g) = answer_prob_gradients(model, query, last, answer, &plan, false)?;
        acc += g.acts[neuron.layer][last * ff + neuron.pos];
    }
    let score = actual / steps as f64 * acc;
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("integrated gradient of {neuron}")));
    }
    Ok(score)
}

/// Normalized attribution of every MLP neuron for one (query, answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub steps_used: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Signed raw scores in layer-major neuron order.
    pub raw: Vec<f64>,
    /// Clamped and normalized scores; sum to 1.
    pub scores: Vec<f64>,
}

impl AttributionResult {
    pub fn from_raw(
        query: Vec<TokenId>,
        answer: TokenId,
        steps: usize,
        n_layers: usize,
        d_ff: usize,
        raw: Vec<f64>,
    ) -> Result<Self> {
        if raw.len() != n_layers * d_ff {
            return Err(Error::arg(format!("{} raw scores for {} neurons", raw.len(), n_layers * d_ff)));
        }
        let scores = normalize(&raw)?;
        Ok(AttributionResult { query, answer, steps_used: steps, n_layers, d_ff, raw, scores })
    }

    pub fn neuron(&self, index: usize) -> NeuronId {
        NeuronId::new(index / self.d_ff, index % self.d_ff)
    }

    pub fn score(&self, n: NeuronId) -> f64 {
        self.scores[n.layer * self.d_ff + n.pos]
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        self.scores.iter().enumerate().map(|(i, &s)| (self.neuron(i), s))
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Highest-scoring neuron; ties go to the earliest neuron.
    pub fn argmax(&self) -> NeuronId {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        self.neuron(best)
    }

    /// Mean normalized score of `neurons`.
    pub fn mean_score(&self, neurons: &[NeuronId]) -> Result<f64> {
        if neurons.is_empty() {
            return Err(Error::arg("mean score over an empty neuron set"));
        }
        Ok(neurons.iter().map(|&n| self.score(n)).sum::<f64>() / neurons.len() as f64)
    }

    pub fn report(&self, vocab: &Vocab) -> AttributionReport {
        AttributionReport {
            query: vocab.decode(&self.query),
            answer: vocab.token(self.answer).to_string(),
            steps: self.steps_used,
            scores: self
                .iter()
                .filter(|(_, s)| *s > 1e-6)
                .map(|(n, score)| SparseScore { layer: n.layer, pos: n.pos, score })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseScore {
    pub layer: usize,
    pub pos: usize,
    pub score: f64,
}

/// JSON form of an [`AttributionResult`]: only scores above 1e-6 are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub query: String,
    pub answer: String,
    pub steps: usize,
    pub scores: Vec<SparseScore>,
}

/// Clamps negatives to zero and rescales to sum 1.
pub fn normalize(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw attribution at neuron index {i}")));
    }
    let total: f64 = raw.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::NoAttributableSignal);
    }
    Ok(raw.iter().map(|v| v.max(0.0) / total).collect())
}

/// Attribution for every MLP neuron. Each point of the path integral re-runs
/// only the final position (see [`AnswerTail`]).
pub fn attribute_all(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    steps: usize,
) -> Result<AttributionResult> {
    if steps == 0 {
        return Err(Error::arg("steps must be >= 1"));
    }
    let cfg = *model.config();
    let base = baseline_activations(model, query)?;
    let tail = AnswerTail::new(model, query, answer)?;
    let raw: Vec<f64> = (0..cfg.neuron_count())
        .into_par_iter()
        .map(|i| {
            let n = NeuronId::new(i / cfg.d_ff, i % cfg.d_ff);
            let actual = tail.natural_activation(n);
            riemann_sum(actual, base[n.layer][n.pos], steps, |w| Ok(tail.eval(n, w).1))
        })
        .collect::<Result<_>>()?;
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("integrated gradient of {}", NeuronId::new(i / cfg.d_ff, i % cfg.d_ff))));
    }
    AttributionResult::from_raw(query.to_vec(), answer, steps, cfg.n_layers, cfg.d_ff, raw)
}

/// How the knowledge-neuron cutoff is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnThreshold {
    /// `factor * max score` of each query.
    Relative {
        factor: f64,
    },
    Absolute {
        tau: f64,
    },
}

impl Default for KnThreshold {
    fn default() -> Self {
        KnThreshold::Relative { factor: DEFAULT_KN_FACTOR }
    }
}

impl KnThreshold {
    pub fn resolve(&self, result: &AttributionResult) -> f64 {
        match *self {
            KnThreshold::Relative { factor } => factor * result.max_score(),
            KnThreshold::Absolute { tau } => tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            KnThreshold::Relative { factor } => factor,
            KnThreshold::Absolute { tau } => tau,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::arg(format!("KN threshold {v} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Knowledge neurons of one fact, sorted by (layer, pos).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnSet {
    pub neurons: Vec<NeuronId>,
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub threshold_used: f64,
}

impl KnSet {
    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn contains(&self, n: NeuronId) -> bool {
        self.neurons.binary_search(&n).is_ok()
    }
}

/// Neurons scoring strictly above `tau`. An empty set is a valid outcome.
pub fn select_kns(result: &AttributionResult, tau: f64) -> KnSet {
    let neurons = result.iter().filter(|(_, s)| *s > tau).map(|(n, _)| n).collect();
    KnSet { neurons, query: result.query.clone(), answer: result.answer, threshold_used: tau }
}

/// Mean normalized attribution of `neurons` for (query, answer).
pub fn score_for_factcheck(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    neurons: &[NeuronId],
    steps: usize,
) -> Result<f64> {
    if neurons.is_empty() {
        return Err(Error::arg("fact-check neuron set is empty"));
    }
    attribute_all(model, query, answer, steps)?.mean_score(neurons)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result_from(raw: Vec<f64>) -> AttributionResult {
        let n = raw.len();
        AttributionResult::from_raw(vec![5], 6, 1, 1, n, raw).unwrap()
    }

    #[test]
    fn baseline_is_all_eos() {
        assert_eq!(baseline_input(&[7, 8, 9]).unwrap(), vec![EOS_ID; 3]);
        assert!(baseline_input(&[]).is_err());
    }

    #[test]
    fn riemann_sum_exact_for_constant_slope() {
        for steps in [1, 2, 7, 20, 333] {
            let v = riemann_sum(1.7, 0.0, steps, |_| Ok(-0.4)).unwrap();
            assert!((v - (-0.4 * 1.7)).abs() < 1e-12, "steps {steps}: {v}");
        }
        assert!(riemann_sum(1.0, 0.0, 0, |_| Ok(1.0)).is_err());
    }

    #[test]
    fn normalization_clamps_and_rescales() {
        let r = result_from(vec![2.0, 3.0, 5.0]);
        assert_eq!(r.scores, vec![0.2, 0.3, 0.5]);
        let r = result_from(vec![-1.0, 1.0, 3.0]);
        assert_eq!(r.scores, vec![0.0, 0.25, 0.75]);
        assert!(matches!(normalize(&[0.0, -2.0]), Err(Error::NoAttributableSignal)));
        assert!(matches!(normalize(&[f64::NAN, 1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn selection_and_means() {
        let r = result_from(vec![0.1, 0.3, 0.0, 0.6]);
        let all = select_kns(&r, 0.0);
        assert_eq!(all.neurons, vec![NeuronId::new(0, 0), NeuronId::new(0, 1), NeuronId::new(0, 3)]);
        assert!(select_kns(&r, r.max_score()).is_empty());
        let kn = select_kns(&r, KnThreshold::default().resolve(&r));
        assert_eq!(kn.threshold_used, 0.2 * 0.6);
        assert_eq!(kn.neurons, vec![NeuronId::new(0, 1), NeuronId::new(0, 3)]);
        let m = r.mean_score(&[NeuronId::new(0, 0), NeuronId::new(0, 1)]).unwrap();
        assert!((m - 0.2).abs() < 1e-12);
        assert_eq!(r.mean_score(&[NeuronId::new(0, 3)]).unwrap(), 0.6);
        let every: Vec<_> = r.iter().map(|(n, _)| n).collect();
        assert!((r.mean_score(&every).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(r.argmax(), NeuronId::new(0, 3));
    }

    #[test]
    fn sparse_report_drops_tiny_scores() {
        let vocab = Vocab::build(["q a"]).unwrap();
        let r = AttributionResult::from_raw(vec![4], 5, 3, 1, 3, vec![1.0, 1e-9, 2.0]).unwrap();
        let rep = r.report(&vocab);
        assert_eq!(rep.query, "q");
        assert_eq!(rep.answer, "a");
        assert_eq!(rep.scores.len(), 2);
        assert_eq!(rep.scores[1].pos, 2);
    }
}
