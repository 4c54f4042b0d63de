//! Experiment configuration and the check of the published hyperparameters.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::KnThreshold;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::experiments::{EvolveConfig, FactCheckConfig, ModelSize};
use crate::intervention::{SuppressionMode, EXCLUSION_DELTA};
use crate::model::TrainHyperParams;
use crate::topology::LocateParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSize,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSpec,
    /// Directory written by `gen-corpus`; the corpus is generated from
    /// `corpus` when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainHyperParams,
    pub locate: LocateParams,
    pub factcheck: FactCheckConfig,
    pub evolve: EvolveConfig,
    pub intervention: InterventionConfig,
}

/// Edit modes used by the sweep and robustness experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub sweep_modes: Vec<SuppressionMode>,
    pub suppress: SuppressionMode,
    pub enhance: SuppressionMode,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            sweep_modes: vec![SuppressionMode::ZeroValues, SuppressionMode::NullEdges],
            suppress: SuppressionMode::ZeroValues,
            enhance: SuppressionMode::ScaleValues { factor: 2.0 },
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSize::Small,
            seeds: vec![0, 1, 2],
            corpus: CorpusSpec::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            train: TrainHyperParams::default(),
            locate: LocateParams::default(),
            factcheck: FactCheckConfig::default(),
            evolve: EvolveConfig::default(),
            intervention: InterventionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.corpus.validate()?;
        self.locate.ntc.validate()?;
        self.locate.kn_threshold.validate()?;
        if self.locate.steps == 0 {
            return Err(Error::Config("attribution steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.factcheck.tau3_factor) {
            return Err(Error::Config(format!("tau3 factor {} outside [0, 1]", self.factcheck.tau3_factor)));
        }
        if !(self.factcheck.split_ratio > 0.0 && self.factcheck.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.factcheck.split_ratio)));
        }
        if let Some(f) = self.evolve.tau_delta_factor {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("tau delta factor {f} outside [0, 1)")));
            }
        }
        let iv = &self.intervention;
        if iv.sweep_modes.is_empty() {
            return Err(Error::Config("intervention.sweep_modes is empty".into()));
        }
        for m in iv.sweep_modes.iter().chain([&iv.suppress, &iv.enhance]) {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for (name, hp) in [("train", &self.train), ("evolve.finetune", &self.evolve.finetune)] {
            if hp.batch_size == 0 || !(hp.learning_rate > 0.0) || !(hp.clip_norm > 0.0) {
                return Err(Error::Config(format!("{name}: batch_size, learning_rate and clip_norm must be positive")));
            }
        }
        Ok(())
    }

    /// Changed-neuron factor in effect for this config's model size.
    pub fn tau_delta_factor(&self) -> f64 {
        self.evolve.tau_delta_factor.unwrap_or(self.model.tau_delta_factor())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamCheck {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    pub ok: bool,
}

/// Compares the config's thresholds with the published settings.
pub fn check_published_hyperparams(cfg: &ExperimentConfig) -> Vec<HyperparamCheck> {
    let kn_note = match cfg.locate.kn_threshold {
        KnThreshold::Relative { .. } => 1.0,
        KnThreshold::Absolute { .. } => 0.0,
    };
    let rows: [(&'static str, f64, f64); 7] = [
        ("tau1_factor", cfg.locate.ntc.tau1_factor, 0.5),
        ("tau2", cfg.locate.ntc.tau2, 0.3),
        ("tau3_factor", cfg.factcheck.tau3_factor, 0.7),
        ("tau_delta_small", ModelSize::Small.tau_delta_factor(), 0.04),
        ("tau_delta_large", ModelSize::Large.tau_delta_factor(), 0.05),
        ("exclusion_delta_prob", EXCLUSION_DELTA, 900.0),
        ("kn_threshold_is_relative", kn_note, 1.0),
    ];
    rows.into_iter()
        .map(|(name, value, expected)| HyperparamCheck { name, value, expected, ok: value == expected })
        .collect()
}
