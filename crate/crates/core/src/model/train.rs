use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::softmax_in_place;
use super::{FreezeMask, TokenId, ToyTransformer};
use crate::error::{Error, Result};
use crate::rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent; only used for diagnostics.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyperParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Seed of the batch-order stream.
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for TrainHyperParams {
    fn default() -> Self {
        TrainHyperParams {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            clip_norm: 1.0,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token cross-entropy of each step's batch, before the update.
    pub losses: Vec<f64>,
}

/// Element-wise trainability of the flat parameter vector.
pub(crate) fn trainable_elements(model: &ToyTransformer, mask: &FreezeMask) -> Vec<bool> {
    let cfg = model.config();
    let lay = model.layout();
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut on = vec![mask.train_non_mlp; lay.total()];
    for ls in &lay.layers {
        for slot in [ls.w_fc, ls.b_fc, ls.w_proj] {
            on[slot.range()].fill(false);
        }
    }
    for n in &mask.trainable_neurons {
        let ls = &lay.layers[n.layer];
        for i in 0..d {
            on[ls.w_fc.offset + i * ff + n.pos] = true;
            on[ls.w_proj.offset + n.pos * d + i] = true;
        }
        on[ls.b_fc.offset + n.pos] = true;
    }
    on
}

/// Loss and parameter gradient of one sequence (sum over its predictions).
fn sequence_grad(model: &ToyTransformer, seq: &[TokenId]) -> Result<(f64, usize, Vec<f64>)> {
    let cache = model.forward_cached(seq, &super::InterventionPlan::new())?;
    let v = model.config().vocab_size;
    let t_len = seq.len();
    let mut dlogits = vec![0.0; t_len * v];
    let mut loss = 0.0;
    for t in 0..t_len - 1 {
        let mut p = cache.logits[t * v..(t + 1) * v].to_vec();
        softmax_in_place(&mut p);
        let target = seq[t + 1];
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
        p[target] -= 1.0;
        dlogits[t * v..(t + 1) * v].copy_from_slice(&p);
    }
    let grads = model.backward(&cache, &dlogits, true);
    Ok((loss, t_len - 1, grads.params))
}

/// Next-token training (Adam unless `hp.optimizer` says otherwise). Parameters outside `mask` are never written.
pub fn train(
    model: &ToyTransformer,
    corpus: &[Vec<TokenId>],
    hp: &TrainHyperParams,
    mask: &FreezeMask,
) -> Result<(ToyTransformer, TrainReport)> {
    mask.validate(model.config())?;
    let usable: Vec<&Vec<TokenId>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::arg("corpus has no sequence with at least two tokens"));
    }
    if hp.batch_size == 0 {
        return Err(Error::arg("batch_size must be >= 1"));
    }
    let mut model = model.clone();
    let trainable = trainable_elements(&model, mask);
    if !trainable.iter().any(|&t| t) {
        return Ok((model, TrainReport::default()));
    }

    let n_params = trainable.len();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut cursor = order.len();
    let mut rng = rng::substream(hp.seed, rng::TRAIN);
    let mut report = TrainReport::default();

    for step in 0..hp.steps {
        let mut batch = Vec::with_capacity(hp.batch_size);
        while batch.len() < hp.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_seq: Vec<Result<(f64, usize, Vec<f64>)>> =
            batch.par_iter().map(|&i| sequence_grad(&model, usable[i])).collect();
        let mut grad = vec![0.0; n_params];
        let (mut loss, mut count) = (0.0, 0usize);
        for r in per_seq {
            let (l, c, g) = r?;
            loss += l;
            count += c;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let loss = loss / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        report.losses.push(loss);

        let inv = 1.0 / count as f64;
        let mut norm_sq = 0.0;
        for (g, &on) in grad.iter_mut().zip(&trainable) {
            *g *= inv;
            if on {
                norm_sq += *g * *g;
            }
        }
        let norm = norm_sq.sqrt();
        let clip = if norm > hp.clip_norm && norm > 0.0 { hp.clip_norm / norm } else { 1.0 };

        let t = (step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let params = model.params_mut();
        for i in 0..n_params {
            if !trainable[i] {
                continue;
            }
            let g = grad[i] * clip;
            if hp.optimizer == Optimizer::Sgd {
                params[i] -= hp.learning_rate * g;
                continue;
            }
            m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * g;
            m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * g * g;
            let update = hp.learning_rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + ADAM_EPS);
            params[i] -= update;
        }
    }
    Ok((model, report))
}
