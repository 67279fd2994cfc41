//! `metaprune`: generate a task universe, build a zoo of pruned models, run
//! meta-vote pruning and its baselines, and study mask overlap.
//!
//! Settings come from built-in defaults, then `--config`, then `--set`,
//! `--seed` and `--metric`, later sources winning.

mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaprune::experiment::{AblationAxis, ExperimentConfig};
use metaprune::model::Criterion;
use metaprune::similarity::Metric;

#[derive(Parser, Debug)]
#[command(name = "metaprune", version, about = "Meta-vote pruning over a synthetic task universe")]
pub struct Cli {
    /// INI file with [section] headers and key = value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for the universe, zoo and result files.
    #[arg(long, global = true, default_value = "metaprune-out")]
    out: PathBuf,
    /// Zoo directory; defaults to <out>/zoo.
    #[arg(long, global = true)]
    zoo: Option<PathBuf>,
    /// Worker threads for zoo building; defaults to the core count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Similarity metric for neighbour search.
    #[arg(long, global = true)]
    metric: Option<Metric>,
    /// Override one setting, as section.key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the taxonomy and task specs.
    GenTasks,
    /// Pretrain the shared model if needed and prune every training task not yet in the zoo.
    BuildZoo {
        /// Importance criterion for IFP; other than the configured one, the zoo goes to <out>/zoo-<criterion>.
        #[arg(long)]
        criterion: Option<Criterion>,
    },
    /// Prune one task directly.
    Prune {
        #[arg(long)]
        task: u64,
        #[arg(long, default_value = "ifp", value_parser = ["ifp", "ahnp", "random"])]
        method: String,
    },
    /// Meta-vote pruning for one task or for the evaluation test tasks.
    Mvp {
        /// Task id; all evaluation test tasks when absent.
        #[arg(long)]
        task: Option<u64>,
        /// Append each result to the zoo as a new record.
        #[arg(long)]
        grow: bool,
    },
    /// Mean mask IoU by similarity group and layer.
    AnalyzeOverlap,
    /// Sweep one setting (or all) over the evaluation test tasks.
    Ablate {
        #[arg(long)]
        axis: Option<AblationAxis>,
    },
    /// MVP against random pruning and IFP from scratch on the evaluation test tasks.
    Report,
    /// Verify every zoo record against its stored hash.
    ZooCheck,
}

impl Cli {
    fn settings(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            settings::apply_file(&mut cfg, path)?;
        }
        for o in &self.overrides {
            settings::apply_override(&mut cfg, o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.metric {
            cfg.metric = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match cli.settings().and_then(|cfg| commands::run(&cli, cfg)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
