// Negated comparisons such as `!(lr > 0.0)` deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, SEARCH_PRESET};

#[derive(Parser)]
#[command(
    name = "capse",
    version,
    about = "Capsule-network triple scoring for knowledge-graph completion and search personalisation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    options: Options,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train TransE embeddings and write them to `<out>/transe.emb`.
    Pretrain,
    /// Train the capsule scorer, keeping the checkpoint with the best
    /// validation Hits@10.
    Train,
    /// Rank the test split with a checkpoint and write metric reports.
    Eval,
    /// Relation multiplicity statistics and test-triple share per category.
    Analyze,
    /// Train and evaluate the search re-ranker on query logs.
    Rerank,
    /// Validation Hits@10 for several routing iteration counts.
    RoutingStudy,
}

/// Flags override the config file, which overrides the dataset preset.
#[derive(clap::Args)]
struct Options {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Embedding size.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of convolution filters.
    #[arg(long, global = true)]
    n_filters: Option<usize>,
    /// Output capsule size.
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Routing iterations.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Positive triples per batch.
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Epochs between validation runs.
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation threads (0: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// random, transe, pretrained:<path> or synset:<path>.
    #[arg(long, global = true)]
    init: Option<String>,
    /// Checkpoint for `eval` (default `<out>/best.ckpt`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated routing iteration counts for `routing-study`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Recency decay for query and user-profile mixtures.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// TransE margin.
    #[arg(long, global = true)]
    margin: Option<f64>,
    #[arg(long, global = true)]
    transe_lr: Option<f64>,
    #[arg(long, global = true)]
    transe_epochs: Option<usize>,
}

impl Options {
    fn pairs(&self) -> Vec<(String, String)> {
        fn path(p: &Option<PathBuf>) -> Option<String> {
            p.as_ref().map(|p| p.display().to_string())
        }
        fn show<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        [
            ("dataset", path(&self.dataset)),
            ("out", path(&self.out)),
            ("k", show(&self.k)),
            ("n_filters", show(&self.n_filters)),
            ("d", show(&self.d)),
            ("m", show(&self.m)),
            ("lr", show(&self.lr)),
            ("batch", show(&self.batch)),
            ("epochs", show(&self.epochs)),
            ("eval_every", show(&self.eval_every)),
            ("seed", show(&self.seed)),
            ("threads", show(&self.threads)),
            ("init", self.init.clone()),
            ("checkpoint", path(&self.checkpoint)),
            ("grid", self.grid.clone()),
            ("delta", show(&self.delta)),
            ("margin", show(&self.margin)),
            ("transe_lr", show(&self.transe_lr)),
            ("transe_epochs", show(&self.transe_epochs)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let preset = matches!(cli.command, Command::Rerank).then_some(SEARCH_PRESET);
    let config = RunConfig::resolve(cli.options.config.as_deref(), &cli.options.pairs(), preset)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build_global()?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&config),
        Command::Train => commands::train(&config),
        Command::Eval => commands::eval(&config),
        Command::Analyze => commands::analyze(&config),
        Command::Rerank => commands::rerank(&config),
        Command::RoutingStudy => commands::routing_study(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
