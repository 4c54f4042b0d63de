use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use dkn_core::config::ExperimentConfig;

mod commands;
mod run;

use commands::*;
use run::{exit_code, load_config, ConfigError, Lab};

#[derive(Parser)]
#[command(name = "dkn-lab", version, about = "Degenerate knowledge neuron experiments on toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Only run this seed instead of every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Also write the CSV series behind the plots.
    #[arg(long, global = true)]
    figure_data: bool,

    /// With `locate`: write each fact's merge tree.
    #[arg(long, global = true)]
    dump_dendrogram: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fact corpus.
    GenCorpus,
    /// Train one model per seed on the corpus.
    Train,
    /// Locate knowledge neurons and degenerate knowledge neurons for every known fact.
    Locate,
    /// Suppress every subset of each fact's clusters.
    Sweep,
    /// Robustness to perturbed queries: suppression and enhancement.
    Perturb,
    /// Fact-checking with relation-level and per-fact neuron sets.
    Factcheck,
    /// Knowledge update with restricted fine-tuning.
    Evolve,
    /// Run every suite on both model sizes and tabulate.
    CompareSizes,
    /// Print the resolved config as TOML.
    PrintConfig,
    /// Compare configured thresholds with the published settings.
    CheckConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ConfigError("--jobs must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let lab = Lab::new(resolve(&cli)?, cli.figure_data, cli.dump_dendrogram)?;
    let size = lab.cfg.model;
    let seeds = lab.cfg.seeds.clone();
    match cli.command {
        Command::GenCorpus => gen_corpus_cmd(&lab),
        Command::Train => seeds.iter().try_for_each(|&s| train_cmd(&lab, size, s)),
        Command::Locate => seeds.iter().try_for_each(|&s| locate_cmd(&lab, size, s)),
        Command::Sweep => seeds.iter().try_for_each(|&s| sweep_cmd(&lab, size, s).map(drop)),
        Command::Perturb => seeds.iter().try_for_each(|&s| perturb_cmd(&lab, size, s).map(drop)),
        Command::Factcheck => seeds.iter().try_for_each(|&s| factcheck_cmd(&lab, size, s).map(drop)),
        Command::Evolve => seeds.iter().try_for_each(|&s| evolve_cmd(&lab, size, s).map(drop)),
        Command::CompareSizes => compare_sizes_cmd(&lab),
        Command::PrintConfig => {
            print!("{}", toml::to_string_pretty(&lab.cfg)?);
            Ok(())
        }
        Command::CheckConfig => check_config_cmd(&lab),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
