//! Flat parameter storage. Every tensor of the model lives in one `Vec<f64>`;
//! the layout maps tensor names to (shape, offset) so optimizers, freeze masks
//! and the weight file format can all treat parameters uniformly.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements into the flat parameter vector.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    /// d_model x d_ff, row-major; column j feeds neuron j.
    pub w_fc: Slot,
    pub b_fc: Slot,
    /// d_ff x d_model, row-major; row j is neuron j's write vector.
    pub w_proj: Slot,
    pub b_proj: Slot,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_gain: Slot,
    pub lnf_bias: Slot,
    pub head: Slot,
    entries: Vec<TensorEntry>,
    total: usize,
}

struct Builder {
    entries: Vec<TensorEntry>,
    next: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.next, len };
        self.entries.push(TensorEntry { name, shape, offset: self.next });
        self.next += len;
        slot
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder { entries: Vec::new(), next: 0 };
        let tok_emb = b.push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = b.push("pos_emb".into(), vec![cfg.max_seq, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln1_gain: b.push(format!("layers.{l}.ln1.gain"), vec![d]),
                ln1_bias: b.push(format!("layers.{l}.ln1.bias"), vec![d]),
                w_qkv: b.push(format!("layers.{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: b.push(format!("layers.{l}.attn.b_qkv"), vec![3 * d]),
                w_out: b.push(format!("layers.{l}.attn.w_out"), vec![d, d]),
                b_out: b.push(format!("layers.{l}.attn.b_out"), vec![d]),
                ln2_gain: b.push(format!("layers.{l}.ln2.gain"), vec![d]),
                ln2_bias: b.push(format!("layers.{l}.ln2.bias"), vec![d]),
                w_fc: b.push(mlp_fc_name(l), vec![d, cfg.d_ff]),
                b_fc: b.push(format!("layers.{l}.mlp.b_fc"), vec![cfg.d_ff]),
                w_proj: b.push(mlp_proj_name(l), vec![cfg.d_ff, d]),
                b_proj: b.push(format!("layers.{l}.mlp.b_proj"), vec![d]),
            })
            .collect();
        let lnf_gain = b.push("ln_f.gain".into(), vec![d]);
        let lnf_bias = b.push("ln_f.bias".into(), vec![d]);
        let head = b.push("head.w".into(), vec![d, cfg.vocab_size]);
        ParamLayout { tok_emb, pos_emb, layers, lnf_gain, lnf_bias, head, total: b.next, entries: b.entries }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn mlp_fc_name(layer: usize) -> String {
    format!("layers.{layer}.mlp.w_fc")
}

pub fn mlp_proj_name(layer: usize) -> String {
    format!("layers.{layer}.mlp.w_proj")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_tile_the_flat_vector() {
        let cfg = ModelConfig::small(50, 0);
        let layout = ParamLayout::new(&cfg);
        let mut next = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, next, "{}", e.name);
            next += e.len();
        }
        assert_eq!(next, layout.total());
        assert_eq!(layout.entry("layers.1.mlp.w_fc").unwrap().shape, vec![64, 128]);
    }
}
