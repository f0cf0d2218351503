//! Experiment driver: corpus generation, label preparation, pre-training,
//! fine-tuning, evaluation, probing, ablations, gradient verification, and
//! report rendering. All state lives under the output directory; rerunning
//! a completed stage is a no-op unless --force is given.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use geodoc_core::config::ExperimentConfig;
use geodoc_core::pipeline::{Pipeline, StageOutcome};

#[derive(Parser)]
#[command(name = "geodoc", version, about = "Geometric layout pre-training laboratory")]
struct Cli {
    /// Experiment configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for per-document parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Rebuild artifacts even when they are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMode {
    Pretrained,
    RandomHeads,
    Scratch,
}

impl InitMode {
    fn as_str(self) -> &'static str {
        match self {
            InitMode::Pretrained => "pretrained",
            InitMode::RandomHeads => "random-heads",
            InitMode::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Tasks,
    Heads,
    Rsf,
    Fewshot,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the pre-train / fine-tune / test corpora.
    GenCorpus,
    /// Precompute the self-supervision label cache.
    PrepareLabels,
    /// Run geometric + masked-token pre-training.
    Pretrain,
    /// Fine-tune for entity tagging and link extraction.
    Finetune {
        /// Initialization: pretrained checkpoint, pretrained backbone with
        /// fresh heads, or fully from scratch.
        #[arg(long, value_enum)]
        init: Option<InitMode>,
    },
    /// Score a fine-tuned checkpoint on the test split.
    Evaluate {
        #[arg(long, value_enum)]
        init: Option<InitMode>,
    },
    /// Linear direction probing of frozen encoders.
    Probe,
    /// Run the ablation grids and emit comparison tables.
    Ablate {
        #[arg(long, value_enum, default_value = "all")]
        grid: Grid,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck,
    /// Render collected metrics and curves into a summary.
    Report,
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();

    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .context("initializing worker pool")?;

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| anyhow!("invalid config {}: {e}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| anyhow!("{e}"))?;

    let pipeline = Pipeline::new(cfg, cli.out.clone(), cli.force);
    let outcome = match &cli.command {
        Command::GenCorpus => pipeline.gen_corpus()?,
        Command::PrepareLabels => pipeline.prepare_labels()?,
        Command::Pretrain => pipeline.pretrain()?,
        Command::Finetune { init } => pipeline.finetune(init.map(InitMode::as_str))?,
        Command::Evaluate { init } => pipeline.evaluate_stage(init.map(InitMode::as_str))?,
        Command::Probe => pipeline.probe()?,
        Command::Ablate { grid } => {
            let grids: Vec<&str> = match grid {
                Grid::Tasks => vec!["tasks"],
                Grid::Heads => vec!["heads"],
                Grid::Rsf => vec!["rsf"],
                Grid::Fewshot => vec!["fewshot"],
                Grid::All => vec!["tasks", "heads", "rsf", "fewshot"],
            };
            pipeline.ablate(&grids)?
        }
        Command::GradCheck => pipeline.grad_check_stage()?,
        Command::Report => pipeline.report()?,
    };

    match outcome {
        StageOutcome::Ran(msg) => println!("{msg}"),
        StageOutcome::Skipped(msg) => println!("skipped - {msg}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
