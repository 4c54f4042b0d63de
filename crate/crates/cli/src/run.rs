//! Run directories, provenance and the errors that map to exit codes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dkn_core::config::ExperimentConfig;
use dkn_core::corpus::SyntheticWorld;
use dkn_core::experiments::{LocatedFact, ModelSize};
use dkn_core::model::io::load_model;
use dkn_core::ToyTransformer;

/// A required input that an earlier command produces.
#[derive(Debug)]
pub struct Missing {
    pub path: PathBuf,
    pub producer: &'static str,
}

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing {}: run `dkn-lab {}` first", self.path.display(), self.producer)
    }
}

impl std::error::Error for Missing {}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Missing>() {
            return EXIT_MISSING;
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<dkn_core::Error>() {
            match e {
                dkn_core::Error::Config(_) => return EXIT_CONFIG,
                dkn_core::Error::NonFinite(_) => return EXIT_NUMERIC,
                _ => {}
            }
        }
    }
    1
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
    };
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolved config plus the settings shared by every command.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub config_hash: String,
    pub figure_data: bool,
    pub dump_dendrogram: bool,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, figure_data: bool, dump_dendrogram: bool) -> Result<Self> {
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        let config_hash = sha256_hex(&serde_json::to_vec(&cfg)?);
        Ok(Lab { cfg, config_hash, figure_data, dump_dendrogram })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.cfg.data_dir.clone().unwrap_or_else(|| self.out().join("corpus"))
    }

    pub fn run_dir(&self, size: ModelSize, seed: u64) -> PathBuf {
        self.out().join(size.label()).join(format!("seed-{seed}"))
    }

    pub fn provenance(&self, command: &str, seed: Option<u64>) -> Value {
        json!({
            "command": command,
            "seed": seed,
            "config_hash": self.config_hash,
            "config": self.cfg,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }

    pub fn load_world(&self) -> Result<SyntheticWorld> {
        let dir = self.corpus_dir();
        require(&dir.join("world.json"), "gen-corpus")?;
        Ok(SyntheticWorld::load(&dir)?)
    }

    pub fn load_model(&self, size: ModelSize, seed: u64) -> Result<ToyTransformer> {
        let dir = self.run_dir(size, seed).join("model");
        require(&dir.join("manifest.json"), "train")?;
        Ok(load_model(&dir)?)
    }

    pub fn load_facts(&self, size: ModelSize, seed: u64) -> Result<Vec<LocatedFact>> {
        let path = self.run_dir(size, seed).join("dkn.jsonl");
        require(&path, "locate")?;
        read_jsonl(&path)
    }
}

pub fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Missing { path: path.to_path_buf(), producer }.into())
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// Collects the files one command writes into a directory and finishes with
/// a manifest next to them.
pub struct Outputs<'c> {
    ctx: &'c Lab,
    command: &'static str,
    seed: Option<u64>,
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl<'c> Outputs<'c> {
    pub fn new(ctx: &'c Lab, command: &'static str, seed: Option<u64>, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { ctx, command, seed, dir, files: vec![], started: Instant::now() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    /// JSON with the provenance block embedded.
    pub fn json<T: Serialize>(&mut self, name: &str, result: &T) -> Result<()> {
        let body = json!({ "provenance": self.ctx.provenance(self.command, self.seed), "result": result });
        let path = self.record(name);
        fs::write(&path, serde_json::to_vec_pretty(&body)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        self.text(name, &out)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.record(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }

    /// Registers a file written by other code.
    pub fn external(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    /// Writes `manifest-<command>.json`: provenance, wall time and the file list.
    /// CSV and JSONL outputs carry their provenance through this file.
    pub fn finish(self) -> Result<()> {
        let body = json!({
            "provenance": self.ctx.provenance(self.command, self.seed),
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "outputs": self.files,
        });
        let path = self.dir.join(format!("manifest-{}.json", self.command));
        fs::write(&path, serde_json::to_vec_pretty(&body)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Serializes rows as CSV with a header taken from the first row's fields.
pub fn csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cause_chain() {
        let missing: anyhow::Error = Missing { path: "x".into(), producer: "train" }.into();
        assert_eq!(exit_code(&missing.context("loading")), EXIT_MISSING);
        assert_eq!(exit_code(&ConfigError("bad".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&dkn_core::Error::NonFinite("loss".into()).into()), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn csv_has_header_from_fields() {
        #[derive(Serialize)]
        struct Row {
            a: u8,
            b: f64,
        }
        assert_eq!(csv(&[Row { a: 1, b: 0.5 }]).unwrap(), "a,b\n1,0.5\n");
    }
}
