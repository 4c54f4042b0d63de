use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// MLP hidden width, i.e. neurons per layer.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, d_model 64, d_ff 128.
    pub fn small(vocab_size: usize, seed: u64) -> Self {
        ModelConfig { n_layers: 2, d_model: 64, d_ff: 128, n_heads: 4, vocab_size, max_seq: 24, seed }
    }

    /// 4 layers, d_model 128, d_ff 256.
    pub fn large(vocab_size: usize, seed: u64) -> Self {
        ModelConfig { n_layers: 4, d_model: 128, d_ff: 256, n_heads: 4, vocab_size, max_seq: 24, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.d_ff
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        super::params::ParamLayout::new(self).total()
    }

    pub fn check_neuron(&self, n: NeuronId) -> Result<()> {
        if n.layer < self.n_layers && n.pos < self.d_ff {
            Ok(())
        } else {
            Err(Error::InvalidNeuron(n))
        }
    }

    /// All neurons in (layer, pos) order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.n_layers).flat_map(move |layer| (0..self.d_ff).map(move |pos| NeuronId { layer, pos }))
    }

    /// Flat index of a neuron in (layer, pos) order.
    pub fn neuron_index(&self, n: NeuronId) -> usize {
        n.layer * self.d_ff + n.pos
    }
}

/// Address of one MLP hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub pos: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, pos: usize) -> Self {
        NeuronId { layer, pos }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_configs_are_valid_and_ordered_by_size() {
        let s = ModelConfig::small(100, 0);
        let l = ModelConfig::large(100, 0);
        s.validate().unwrap();
        l.validate().unwrap();
        assert!(s.param_count() < l.param_count());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::small(100, 0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small(100, 0);
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn neuron_order_is_layer_major() {
        let c = ModelConfig { n_layers: 2, d_ff: 3, ..ModelConfig::small(10, 0) };
        let all: Vec<_> = c.neurons().collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[4], NeuronId::new(1, 1));
        assert_eq!(c.neuron_index(all[4]), 4);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }
}
