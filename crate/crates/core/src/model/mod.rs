//! Toy decoder-only transformer: the substrate for every experiment.

mod config;
pub mod io;
pub(crate) mod ops;
pub mod params;
mod plan;
mod tail;
pub mod tokenizer;
mod train;
mod transformer;

pub use config::{ModelConfig, NeuronId};
pub use plan::{FreezeMask, InterventionPlan, ValueEdit};
pub use tail::AnswerTail;
pub use tokenizer::{TokenId, Vocab};
pub use train::{train, Optimizer, TrainHyperParams, TrainReport};
pub use transformer::{ActivationTrace, ForwardOutput, Gradients, ToyTransformer};

use crate::error::{Error, Result};

/// Read access to the per-neuron MLP weights, shared by the toy model and
/// MLP-only weight exports of real checkpoints.
pub trait NeuronWeights {
    fn n_layers(&self) -> usize;
    fn d_ff(&self) -> usize;
    fn d_model(&self) -> usize;
    /// The neuron's input column of `W_fc` (length d_model).
    fn w_fc_column(&self, n: NeuronId) -> Vec<f64>;
    /// The neuron's output row of `W_proj` (length d_model).
    fn w_proj_row(&self, n: NeuronId) -> Vec<f64>;

    /// Direct residual pathway weight `u_A . v_B` from `a` into `b`.
    fn pathway_weight(&self, a: NeuronId, b: NeuronId) -> f64 {
        let u = self.w_proj_row(a);
        let v = self.w_fc_column(b);
        ops::dot(&u, &v)
    }

    fn contains(&self, n: NeuronId) -> bool {
        n.layer < self.n_layers() && n.pos < self.d_ff()
    }
}

fn check_answer(model: &ToyTransformer, answer: TokenId) -> Result<()> {
    if answer >= model.config().vocab_size {
        return Err(Error::TokenOutOfVocab { token: answer, vocab: model.config().vocab_size });
    }
    Ok(())
}

/// Next-token distribution after `query`.
pub fn answer_distribution(model: &ToyTransformer, query: &[TokenId], plan: &InterventionPlan) -> Result<Vec<f64>> {
    let out = model.forward(query, plan, false)?;
    let mut dist = out.last_logits(model.config().vocab_size).to_vec();
    ops::softmax_in_place(&mut dist);
    Ok(dist)
}

/// Probability the model assigns to `answer` as the token following `query`.
pub fn predict_prob(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    plan: &InterventionPlan,
) -> Result<f64> {
    check_answer(model, answer)?;
    Ok(answer_distribution(model, query, plan)?[answer])
}

/// Top-1 next token; ties resolve to the lowest id.
pub fn greedy_next(model: &ToyTransformer, query: &[TokenId], plan: &InterventionPlan) -> Result<TokenId> {
    let out = model.forward(query, plan, false)?;
    let logits = out.last_logits(model.config().vocab_size);
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Gradients of `p(answer | tokens[..=target_pos])` with respect to every
/// post-edit activation (and optionally every parameter).
pub fn answer_prob_gradients(
    model: &ToyTransformer,
    tokens: &[TokenId],
    target_pos: usize,
    answer: TokenId,
    plan: &InterventionPlan,
    want_params: bool,
) -> Result<(f64, Gradients)> {
    check_answer(model, answer)?;
    if target_pos >= tokens.len() {
        return Err(Error::arg(format!("target position {target_pos} past sequence end")));
    }
    let cache = model.forward_cached(tokens, plan)?;
    let v = model.config().vocab_size;
    let mut probs = cache.logits[target_pos * v..(target_pos + 1) * v].to_vec();
    ops::softmax_in_place(&mut probs);
    let pa = probs[answer];
    let mut dlogits = vec![0.0; tokens.len() * v];
    for (k, p) in probs.iter().enumerate() {
        dlogits[target_pos * v + k] = pa * (if k == answer { 1.0 } else { 0.0 } - p);
    }
    Ok((pa, model.backward(&cache, &dlogits, want_params)))
}

/// dF/da for neuron `neuron` at the answer position, where F is the answer
/// probability and the neuron's activation is pinned to `injected`.
pub fn backprop_neuron_grad(
    model: &ToyTransformer,
    query: &[TokenId],
    answer: TokenId,
    neuron: NeuronId,
    injected: f64,
) -> Result<f64> {
    model.config().check_neuron(neuron)?;
    if query.is_empty() {
        return Err(Error::EmptySequence);
    }
    let plan = InterventionPlan::new().with_value(neuron, ValueEdit::inject(injected))?;
    let (_, grads) = answer_prob_gradients(model, query, query.len() - 1, answer, &plan, false)?;
    let ff = model.config().d_ff;
    let g = grads.acts[neuron.layer][(query.len() - 1) * ff + neuron.pos];
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("gradient for {neuron}")));
    }
    Ok(g)
}
