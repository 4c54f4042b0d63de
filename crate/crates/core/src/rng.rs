//! Named random substreams derived from a single root seed.
//!
//! Every consumer of randomness (corpus generation, splits, perturbations,
//! random baselines, weight init) asks for its own stream by name, so adding
//! a draw in one place never shifts the numbers another place sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const CORPUS: &str = "corpus";
pub const SPLIT: &str = "split";
pub const PERTURB: &str = "perturb";
pub const RANDOM_BASELINE: &str = "random-baseline";
pub const INIT: &str = "init";
pub const TRAIN: &str = "train";

pub fn substream(root: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Same as [`substream`] with an extra integer discriminator (e.g. a query index).
pub fn indexed(root: u64, name: &str, index: u64) -> StreamRng {
    substream(root, &format!("{name}/{index}"))
}
