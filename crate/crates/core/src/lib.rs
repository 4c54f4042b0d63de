pub mod attribution;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evolution;
pub mod experiments;
pub mod factcheck;
pub mod intervention;
pub mod model;
pub mod perturbation;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
pub use model::{
    FreezeMask, InterventionPlan, ModelConfig, NeuronId, NeuronWeights, TokenId, ToyTransformer, ValueEdit, Vocab,
};
