//! Answer-position re-evaluation for single-neuron edits.
//!
//! Editing one neuron at the final position cannot change any earlier
//! position (causal attention) nor any lower layer, so the model only needs
//! to be re-run for the final position from the edited layer upward, reusing
//! the cached keys and values of the prefix. Integrated gradients evaluate
//! thousands of such edits per query, which makes this path the hot loop.

use super::ops::{dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_add, matmul_bt_add, softmax_in_place};
use super::{NeuronId, TokenId, ToyTransformer};
use crate::error::Result;
use crate::model::InterventionPlan;

pub struct AnswerTail<'m> {
    model: &'m ToyTransformer,
    answer: TokenId,
    /// Per layer, `(T-1) x d` keys and values of the prefix positions.
    prefix_k: Vec<Vec<f64>>,
    prefix_v: Vec<Vec<f64>>,
    /// Residual stream after each layer at the final position.
    resid: Vec<Vec<f64>>,
    /// Unedited final-position activations per layer.
    act_last: Vec<Vec<f64>>,
}

struct StepCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads x T`
    probs: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    pre: Vec<f64>,
}

impl<'m> AnswerTail<'m> {
    pub fn new(model: &'m ToyTransformer, query: &[TokenId], answer: TokenId) -> Result<Self> {
        super::check_answer(model, answer)?;
        let cache = model.forward_cached(query, &InterventionPlan::new())?;
        let cfg = model.config();
        let (t_len, d, ff) = (query.len(), cfg.d_model, cfg.d_ff);
        let last = t_len - 1;
        let mut prefix_k = Vec::with_capacity(cfg.n_layers);
        let mut prefix_v = Vec::with_capacity(cfg.n_layers);
        for c in &cache.layers {
            let mut k = Vec::with_capacity(last * d);
            let mut v = Vec::with_capacity(last * d);
            for u in 0..last {
                k.extend_from_slice(&c.qkv[u * 3 * d + d..u * 3 * d + 2 * d]);
                v.extend_from_slice(&c.qkv[u * 3 * d + 2 * d..u * 3 * d + 3 * d]);
            }
            prefix_k.push(k);
            prefix_v.push(v);
        }
        let resid = cache.layers.iter().map(|c| c.x_out[last * d..].to_vec()).collect();
        let act_last = cache.layers.iter().map(|c| c.act[last * ff..].to_vec()).collect();
        Ok(AnswerTail { model, answer, prefix_k, prefix_v, resid, act_last })
    }

    pub fn natural_activation(&self, n: NeuronId) -> f64 {
        self.act_last[n.layer][n.pos]
    }

    /// Answer probability with `n` pinned to `value` at the final position.
    pub fn prob(&self, n: NeuronId, value: f64) -> f64 {
        self.run(n, value, false).0
    }

    /// (answer probability, d probability / d activation) with `n` pinned to
    /// `value` at the final position.
    pub fn eval(&self, n: NeuronId, value: f64) -> (f64, f64) {
        self.run(n, value, true)
    }

    fn run(&self, n: NeuronId, value: f64, with_grad: bool) -> (f64, f64) {
        let m = self.model;
        let cfg = m.config();
        let lay = m.layout();
        let (d, ff, nh, dh, vocab) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
        let scale = 1.0 / (dh as f64).sqrt();
        let n_prefix = self.prefix_k[0].len() / d;
        let t_len = n_prefix + 1;

        let u = &m.s(lay.layers[n.layer].w_proj)[n.pos * d..(n.pos + 1) * d];
        let delta = value - self.act_last[n.layer][n.pos];
        let mut r: Vec<f64> = self.resid[n.layer].iter().zip(u).map(|(x, w)| x + delta * w).collect();

        let mut steps: Vec<StepCache> = Vec::new();
        for l in n.layer + 1..cfg.n_layers {
            let ls = &lay.layers[l];
            let mut h1 = vec![0.0; d];
            let (ln1_xhat, ln1_rstd) = layer_norm(&r, m.s(ls.ln1_gain), m.s(ls.ln1_bias), &mut h1);
            let mut qkv = m.s(ls.b_qkv).to_vec();
            matmul_add(&mut qkv, &h1, m.s(ls.w_qkv), 1, d, 3 * d);
            let (q, rest) = qkv.split_at(d);
            let (k, v) = rest.split_at(d);
            let mut probs = vec![0.0; nh * t_len];
            let mut cat = vec![0.0; d];
            let (pk, pv) = (&self.prefix_k[l], &self.prefix_v[l]);
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let row = &mut probs[h * t_len..(h + 1) * t_len];
                for uu in 0..n_prefix {
                    row[uu] = dot(&q[hs.clone()], &pk[uu * d + h * dh..uu * d + (h + 1) * dh]) * scale;
                }
                row[n_prefix] = dot(&q[hs.clone()], &k[hs.clone()]) * scale;
                softmax_in_place(row);
                let out = &mut cat[hs.clone()];
                for (uu, &p) in row.iter().enumerate() {
                    let vrow = if uu < n_prefix { &pv[uu * d + h * dh..uu * d + (h + 1) * dh] } else { &v[hs.clone()] };
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
            let mut attn = m.s(ls.b_out).to_vec();
            matmul_add(&mut attn, &cat, m.s(ls.w_out), 1, d, d);
            for (x, a) in r.iter_mut().zip(&attn) {
                *x += a;
            }
            let mut h2 = vec![0.0; d];
            let (ln2_xhat, ln2_rstd) = layer_norm(&r, m.s(ls.ln2_gain), m.s(ls.ln2_bias), &mut h2);
            let mut pre = m.s(ls.b_fc).to_vec();
            matmul_add(&mut pre, &h2, m.s(ls.w_fc), 1, d, ff);
            let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
            let mut out = m.s(ls.b_proj).to_vec();
            matmul_add(&mut out, &act, m.s(ls.w_proj), 1, ff, d);
            for (x, o) in r.iter_mut().zip(&out) {
                *x += o;
            }
            steps.push(StepCache {
                ln1_xhat,
                ln1_rstd,
                q: q.to_vec(),
                k: k.to_vec(),
                v: v.to_vec(),
                probs,
                ln2_xhat,
                ln2_rstd,
                pre,
            });
        }

        let mut hf = vec![0.0; d];
        let (lnf_xhat, lnf_rstd) = layer_norm(&r, m.s(lay.lnf_gain), m.s(lay.lnf_bias), &mut hf);
        let mut probs = vec![0.0; vocab];
        matmul_add(&mut probs, &hf, m.s(lay.head), 1, d, vocab);
        softmax_in_place(&mut probs);
        let pa = probs[self.answer];
        if !with_grad {
            return (pa, 0.0);
        }

        let dlogits: Vec<f64> =
            probs.iter().enumerate().map(|(k, p)| pa * (if k == self.answer { 1.0 } else { 0.0 } - p)).collect();
        let mut dhf = vec![0.0; d];
        matmul_bt_add(&mut dhf, &dlogits, m.s(lay.head), 1, vocab, d);
        let mut dr = vec![0.0; d];
        layer_norm_backward(&dhf, &lnf_xhat, &lnf_rstd, m.s(lay.lnf_gain), None, None, &mut dr);

        for (i, sc) in steps.iter().enumerate().rev() {
            let ls = &lay.layers[n.layer + 1 + i];
            let mut dpre = vec![0.0; ff];
            matmul_bt_add(&mut dpre, &dr, m.s(ls.w_proj), 1, d, ff);
            for (dp, &p) in dpre.iter_mut().zip(&sc.pre) {
                *dp *= gelu_grad(p);
            }
            let mut dh2 = vec![0.0; d];
            matmul_bt_add(&mut dh2, &dpre, m.s(ls.w_fc), 1, ff, d);
            layer_norm_backward(&dh2, &sc.ln2_xhat, &sc.ln2_rstd, m.s(ls.ln2_gain), None, None, &mut dr);

            let mut dcat = vec![0.0; d];
            matmul_bt_add(&mut dcat, &dr, m.s(ls.w_out), 1, d, d);
            let mut dqkv = vec![0.0; 3 * d];
            let (pk, pv) = (&self.prefix_k[n.layer + 1 + i], &self.prefix_v[n.layer + 1 + i]);
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let row = &sc.probs[h * t_len..(h + 1) * t_len];
                let dout = &dcat[hs.clone()];
                let mut weighted = 0.0;
                for uu in 0..t_len {
                    let vrow =
                        if uu < n_prefix { &pv[uu * d + h * dh..uu * d + (h + 1) * dh] } else { &sc.v[hs.clone()] };
                    dp[uu] = dot(dout, vrow);
                    weighted += row[uu] * dp[uu];
                }
                let p_self = row[n_prefix];
                for j in 0..dh {
                    dqkv[2 * d + h * dh + j] += p_self * dout[j];
                }
                for uu in 0..t_len {
                    let ds = row[uu] * (dp[uu] - weighted) * scale;
                    let krow =
                        if uu < n_prefix { &pk[uu * d + h * dh..uu * d + (h + 1) * dh] } else { &sc.k[hs.clone()] };
                    for j in 0..dh {
                        dqkv[h * dh + j] += ds * krow[j];
                    }
                    if uu == n_prefix {
                        for j in 0..dh {
                            dqkv[d + h * dh + j] += ds * sc.q[h * dh + j];
                        }
                    }
                }
            }
            let mut dh1 = vec![0.0; d];
            matmul_bt_add(&mut dh1, &dqkv, m.s(ls.w_qkv), 1, 3 * d, d);
            layer_norm_backward(&dh1, &sc.ln1_xhat, &sc.ln1_rstd, m.s(ls.ln1_gain), None, None, &mut dr);
        }
        (pa, dot(&dr, u))
    }
}
