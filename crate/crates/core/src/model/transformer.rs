//! Pre-LayerNorm decoder-only transformer with GELU MLPs, instrumented for
//! neuron-level interventions and reverse-mode gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    add_bias, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_add, matmul_at_add, matmul_bt_add,
    softmax_in_place, sum_rows_into,
};
use super::params::{ParamLayout, Slot};
use super::plan::InterventionPlan;
use super::tokenizer::TokenId;
use super::{ModelConfig, NeuronId, NeuronWeights};
use crate::error::{Error, Result};
use crate::rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Post-edit MLP activations for every (layer, position), plus the
/// next-token distribution at the final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub seq_len: usize,
    pub d_ff: usize,
    /// `activations[layer][t * d_ff + pos]`
    pub activations: Vec<Vec<f64>>,
    pub answer_distribution: Vec<f64>,
}

impl ActivationTrace {
    pub fn activation(&self, n: NeuronId, t: usize) -> f64 {
        self.activations[n.layer][t * self.d_ff + n.pos]
    }

    /// Activation at the final (answer) position.
    pub fn last(&self, n: NeuronId) -> f64 {
        self.activation(n, self.seq_len - 1)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq_len x vocab_size`, row-major.
    pub logits: Vec<f64>,
    pub trace: Option<ActivationTrace>,
}

impl ForwardOutput {
    pub fn last_logits(&self, vocab: usize) -> &[f64] {
        &self.logits[self.logits.len() - vocab..]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub h1: Vec<f64>,
    pub qkv: Vec<f64>,
    /// `n_heads x T x T`, zero above the diagonal.
    pub probs: Vec<f64>,
    pub cat: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub h2: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    /// Residual stream after this layer.
    pub x_out: Vec<f64>,
    /// (lower pos, upper pos, gain, pathway weight) for edge edits into this layer.
    pub edges: Vec<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub tokens: Vec<TokenId>,
    pub plan: InterventionPlan,
    pub layers: Vec<LayerCache>,
    pub lnf_xhat: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
    pub hf: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Output of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as the model parameters; empty when not requested.
    pub params: Vec<f64>,
    /// `acts[layer][t * d_ff + pos]`: gradient w.r.t. the post-edit activation.
    pub acts: Vec<Vec<f64>>,
}

impl ToyTransformer {
    /// Fresh model with weights drawn from the `init` substream of `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = rng::substream(config.seed, rng::INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj_normal = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut fill = |slot: Slot, dist: &Normal<f64>, rng: &mut rng::StreamRng| {
            for v in &mut params[slot.range()] {
                *v = dist.sample(rng);
            }
        };
        fill(layout.tok_emb, &normal, &mut rng);
        fill(layout.pos_emb, &normal, &mut rng);
        for ls in &layout.layers {
            fill(ls.w_qkv, &normal, &mut rng);
            fill(ls.w_out, &proj_normal, &mut rng);
            fill(ls.w_fc, &normal, &mut rng);
            fill(ls.w_proj, &proj_normal, &mut rng);
        }
        fill(layout.head, &normal, &mut rng);
        for slot in layout.layers.iter().flat_map(|l| [l.ln1_gain, l.ln2_gain]).chain([layout.lnf_gain]) {
            params[slot.range()].fill(1.0);
        }
        // keep the rng draw count independent of anything below
        let _: u64 = rng.random();
        Ok(ToyTransformer { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::WeightFormat(format!("expected {} parameters, got {}", layout.total(), params.len())));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(ToyTransformer { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.params[e.offset..e.offset + e.len()])
    }

    /// True when every parameter has the same bit pattern.
    pub fn bitwise_eq(&self, other: &ToyTransformer) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    #[inline]
    pub(crate) fn s(&self, slot: Slot) -> &[f64] {
        &self.params[slot.range()]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfVocab { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[TokenId], plan: &InterventionPlan, capture: bool) -> Result<ForwardOutput> {
        let cache = self.forward_cached(tokens, plan)?;
        let trace = capture.then(|| self.trace_from(&cache));
        Ok(ForwardOutput { logits: cache.logits, trace })
    }

    pub(crate) fn trace_from(&self, cache: &ForwardCache) -> ActivationTrace {
        let v = self.config.vocab_size;
        let mut dist = cache.logits[cache.logits.len() - v..].to_vec();
        softmax_in_place(&mut dist);
        ActivationTrace {
            seq_len: cache.seq_len(),
            d_ff: self.config.d_ff,
            activations: cache.layers.iter().map(|l| l.act.clone()).collect(),
            answer_distribution: dist,
        }
    }

    pub(crate) fn forward_cached(&self, tokens: &[TokenId], plan: &InterventionPlan) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        plan.validate(&self.config)?;
        let cfg = &self.config;
        let (t_len, d, ff, nh, dh) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = &self.layout;

        let mut x = vec![0.0; t_len * d];
        let tok_emb = self.s(lay.tok_emb);
        let pos_emb = self.s(lay.pos_emb);
        for (t, &tok) in tokens.iter().enumerate() {
            for i in 0..d {
                x[t * d + i] = tok_emb[tok * d + i] + pos_emb[t * d + i];
            }
        }

        let mut layers: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);
        for (l, ls) in lay.layers.iter().enumerate() {
            let mut h1 = vec![0.0; t_len * d];
            let (ln1_xhat, ln1_rstd) = layer_norm(&x, self.s(ls.ln1_gain), self.s(ls.ln1_bias), &mut h1);
            let mut qkv = vec![0.0; t_len * 3 * d];
            matmul_add(&mut qkv, &h1, self.s(ls.w_qkv), t_len, d, 3 * d);
            add_bias(&mut qkv, self.s(ls.b_qkv));

            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut cat = vec![0.0; t_len * d];
            for h in 0..nh {
                for t in 0..t_len {
                    let q = &qkv[t * 3 * d + h * dh..t * 3 * d + (h + 1) * dh];
                    let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    for (u, p) in row.iter_mut().enumerate() {
                        let k = &qkv[u * 3 * d + d + h * dh..u * 3 * d + d + (h + 1) * dh];
                        *p = dot(q, k) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut cat[t * d + h * dh..t * d + (h + 1) * dh];
                    for (u, &p) in row.iter().enumerate() {
                        let v = &qkv[u * 3 * d + 2 * d + h * dh..u * 3 * d + 2 * d + (h + 1) * dh];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; t_len * d];
            matmul_add(&mut attn_out, &cat, self.s(ls.w_out), t_len, d, d);
            add_bias(&mut attn_out, self.s(ls.b_out));
            for (xv, a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }

            let mut h2 = vec![0.0; t_len * d];
            let (ln2_xhat, ln2_rstd) = layer_norm(&x, self.s(ls.ln2_gain), self.s(ls.ln2_bias), &mut h2);
            let mut pre = vec![0.0; t_len * ff];
            matmul_add(&mut pre, &h2, self.s(ls.w_fc), t_len, d, ff);
            add_bias(&mut pre, self.s(ls.b_fc));

            let mut edges = Vec::new();
            if l > 0 {
                let prev_act = &layers[l - 1].act;
                for (a, b, gain) in plan.edges_into_layer(l) {
                    let w = self.pathway_weight(a, b);
                    for t in 0..t_len {
                        pre[t * ff + b.pos] += (gain - 1.0) * prev_act[t * ff + a.pos] * w;
                    }
                    edges.push((a.pos, b.pos, gain, w));
                }
            }

            let mut act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
            for (pos, edit) in plan.values_in_layer(l) {
                for t in 0..t_len {
                    let cell = &mut act[t * ff + pos];
                    *cell = edit.apply(*cell, t + 1 == t_len).0;
                }
            }

            let mut mlp_out = vec![0.0; t_len * d];
            matmul_add(&mut mlp_out, &act, self.s(ls.w_proj), t_len, ff, d);
            add_bias(&mut mlp_out, self.s(ls.b_proj));
            for (xv, m) in x.iter_mut().zip(&mlp_out) {
                *xv += m;
            }

            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv,
                probs,
                cat,
                ln2_xhat,
                ln2_rstd,
                h2,
                pre,
                act,
                x_out: x.clone(),
                edges,
            });
        }

        let mut hf = vec![0.0; t_len * d];
        let (lnf_xhat, lnf_rstd) = layer_norm(&x, self.s(lay.lnf_gain), self.s(lay.lnf_bias), &mut hf);
        let mut logits = vec![0.0; t_len * cfg.vocab_size];
        matmul_add(&mut logits, &hf, self.s(lay.head), t_len, d, cfg.vocab_size);
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i}")));
        }

        Ok(ForwardCache { tokens: tokens.to_vec(), plan: plan.clone(), layers, lnf_xhat, lnf_rstd, hf, logits })
    }

    /// Reverse-mode pass from an upstream gradient on the logits
    /// (`seq_len x vocab_size`).
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &[f64], want_params: bool) -> Gradients {
        let cfg = &self.config;
        let lay = &self.layout;
        let (t_len, d, ff, nh, dh, v) =
            (cache.seq_len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut g = if want_params { vec![0.0; lay.total()] } else { Vec::new() };
        let mut acts = vec![vec![0.0; t_len * ff]; cfg.n_layers];

        if want_params {
            matmul_at_add(&mut g[lay.head.range()], &cache.hf, dlogits, t_len, d, v);
        }
        let mut dhf = vec![0.0; t_len * d];
        matmul_bt_add(&mut dhf, dlogits, self.s(lay.head), t_len, v, d);
        let mut dx = vec![0.0; t_len * d];
        let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
        layer_norm_backward(
            &dhf,
            &cache.lnf_xhat,
            &cache.lnf_rstd,
            self.s(lay.lnf_gain),
            Some(&mut dgain),
            Some(&mut dbias),
            &mut dx,
        );
        if want_params {
            add_into(&mut g, lay.lnf_gain, &dgain);
            add_into(&mut g, lay.lnf_bias, &dbias);
        }

        // gradient flowing into layer l's activations through edge edits of layer l+1
        let mut edge_dact = vec![0.0; t_len * ff];
        for l in (0..cfg.n_layers).rev() {
            let ls = &lay.layers[l];
            let c = &cache.layers[l];

            // MLP
            if want_params {
                matmul_at_add(&mut g[ls.w_proj.range()], &c.act, &dx, t_len, ff, d);
                sum_rows_into(&mut g[ls.b_proj.range()], &dx);
            }
            let dact = &mut acts[l];
            matmul_bt_add(dact, &dx, self.s(ls.w_proj), t_len, d, ff);
            for (a, e) in dact.iter_mut().zip(&edge_dact) {
                *a += e;
            }
            let mut dpre: Vec<f64> = dact.clone();
            for (i, dp) in dpre.iter_mut().enumerate() {
                *dp *= gelu_grad(c.pre[i]);
            }
            for (pos, edit) in cache.plan.values_in_layer(l) {
                for t in 0..t_len {
                    let gelu_d = gelu_grad(c.pre[t * ff + pos]);
                    let (_, dedit) = edit.apply(0.0, t + 1 == t_len);
                    dpre[t * ff + pos] = dact[t * ff + pos] * dedit * gelu_d;
                }
            }

            edge_dact.iter_mut().for_each(|e| *e = 0.0);
            if l > 0 {
                let prev_act = &cache.layers[l - 1].act;
                let prev = &lay.layers[l - 1];
                for &(a, b, gain, w) in &c.edges {
                    let mut dw = 0.0;
                    for t in 0..t_len {
                        let dp = dpre[t * ff + b];
                        edge_dact[t * ff + a] += dp * (gain - 1.0) * w;
                        dw += dp * (gain - 1.0) * prev_act[t * ff + a];
                    }
                    if want_params && dw != 0.0 {
                        let u = self.s(prev.w_proj)[a * d..(a + 1) * d].to_vec();
                        let fc = self.s(ls.w_fc);
                        let vcol: Vec<f64> = (0..d).map(|i| fc[i * ff + b]).collect();
                        let pslot = prev.w_proj.offset + a * d;
                        for i in 0..d {
                            g[pslot + i] += dw * vcol[i];
                            g[ls.w_fc.offset + i * ff + b] += dw * u[i];
                        }
                    }
                }
            }

            if want_params {
                matmul_at_add(&mut g[ls.w_fc.range()], &c.h2, &dpre, t_len, d, ff);
                sum_rows_into(&mut g[ls.b_fc.range()], &dpre);
            }
            let mut dh2 = vec![0.0; t_len * d];
            matmul_bt_add(&mut dh2, &dpre, self.s(ls.w_fc), t_len, ff, d);
            dgain.fill(0.0);
            dbias.fill(0.0);
            // dx now accumulates into the mid-layer residual gradient
            layer_norm_backward(
                &dh2,
                &c.ln2_xhat,
                &c.ln2_rstd,
                self.s(ls.ln2_gain),
                Some(&mut dgain),
                Some(&mut dbias),
                &mut dx,
            );
            if want_params {
                add_into(&mut g, ls.ln2_gain, &dgain);
                add_into(&mut g, ls.ln2_bias, &dbias);
            }

            // attention
            if want_params {
                matmul_at_add(&mut g[ls.w_out.range()], &c.cat, &dx, t_len, d, d);
                sum_rows_into(&mut g[ls.b_out.range()], &dx);
            }
            let mut dcat = vec![0.0; t_len * d];
            matmul_bt_add(&mut dcat, &dx, self.s(ls.w_out), t_len, d, d);
            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut dp_row = vec![0.0; t_len];
            for h in 0..nh {
                for t in 0..t_len {
                    let prow = &c.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    let dout = &dcat[t * d + h * dh..t * d + (h + 1) * dh];
                    let mut weighted = 0.0;
                    for (u, &p) in prow.iter().enumerate() {
                        let vo = u * 3 * d + 2 * d + h * dh;
                        dp_row[u] = dot(dout, &c.qkv[vo..vo + dh]);
                        weighted += p * dp_row[u];
                        for i in 0..dh {
                            dqkv[vo + i] += p * dout[i];
                        }
                    }
                    let qo = t * 3 * d + h * dh;
                    for (u, &p) in prow.iter().enumerate() {
                        let ds = p * (dp_row[u] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = u * 3 * d + d + h * dh;
                        for i in 0..dh {
                            dqkv[qo + i] += ds * c.qkv[ko + i];
                            dqkv[ko + i] += ds * c.qkv[qo + i];
                        }
                    }
                }
            }
            if want_params {
                matmul_at_add(&mut g[ls.w_qkv.range()], &c.h1, &dqkv, t_len, d, 3 * d);
                sum_rows_into(&mut g[ls.b_qkv.range()], &dqkv);
            }
            let mut dh1 = vec![0.0; t_len * d];
            matmul_bt_add(&mut dh1, &dqkv, self.s(ls.w_qkv), t_len, 3 * d, d);
            dgain.fill(0.0);
            dbias.fill(0.0);
            layer_norm_backward(
                &dh1,
                &c.ln1_xhat,
                &c.ln1_rstd,
                self.s(ls.ln1_gain),
                Some(&mut dgain),
                Some(&mut dbias),
                &mut dx,
            );
            if want_params {
                add_into(&mut g, ls.ln1_gain, &dgain);
                add_into(&mut g, ls.ln1_bias, &dbias);
            }
        }

        if want_params {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                for i in 0..d {
                    g[lay.tok_emb.offset + tok * d + i] += dx[t * d + i];
                    g[lay.pos_emb.offset + t * d + i] += dx[t * d + i];
                }
            }
        }
        Gradients { params: g, acts }
    }
}

fn add_into(g: &mut [f64], slot: Slot, src: &[f64]) {
    for (a, b) in g[slot.range()].iter_mut().zip(src) {
        *a += b;
    }
}

impl NeuronWeights for ToyTransformer {
    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn d_ff(&self) -> usize {
        self.config.d_ff
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn w_fc_column(&self, n: NeuronId) -> Vec<f64> {
        let fc = self.s(self.layout.layers[n.layer].w_fc);
        let ff = self.config.d_ff;
        (0..self.config.d_model).map(|i| fc[i * ff + n.pos]).collect()
    }

    fn w_proj_row(&self, n: NeuronId) -> Vec<f64> {
        let d = self.config.d_model;
        self.s(self.layout.layers[n.layer].w_proj)[n.pos * d..(n.pos + 1) * d].to_vec()
    }

    fn pathway_weight(&self, a: NeuronId, b: NeuronId) -> f64 {
        let d = self.config.d_model;
        let ff = self.config.d_ff;
        let u = &self.s(self.layout.layers[a.layer].w_proj)[a.pos * d..(a.pos + 1) * d];
        let fc = self.s(self.layout.layers[b.layer].w_fc);
        (0..d).map(|i| u[i] * fc[i * ff + b.pos]).sum()
    }
}
