use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dytag::config::{load_config, ConfigError, RunConfig};
use dytag::ingest::{self, IngestError};
use dytag::pipeline::{self, PipelineError, Stage};
use dytag_core::eval::{label_consistency, pareto_coverage, ConsistencyOptions, DEFAULT_MIN_REPEATED};
use dytag_core::knowledge::KnowledgeStore;
use dytag_core::metrics::{pair_evidence_with, Direction, MetricOptions};
use dytag_core::predict::{build_queries, Task};
use dytag_core::recall::{apply_thresholds, rank_candidates, ranking_keys, STRUCTURAL_KEYS};
use dytag_core::{synth, DyTagStore, NodeId, StoreError, Timestamp};

/// Dynamic text-attributed graph prediction with agent-generated knowledge.
#[derive(Parser)]
#[command(name = "dytag", version, about)]
struct Cli {
    /// Log level: error, warn, info, debug or trace (RUST_LOG overrides).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Recompute every stage even when cached outputs match.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Auto,
    Canonical,
    Dtgb,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (canonical CSV layout or DTGB layout).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: Format,
    /// Treat the graph as bipartite (sources and destinations disjoint).
    #[arg(long)]
    bipartite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: ingest, prep, knowledge, predict, evaluate.
    Run(RunArgs),
    /// Validate a config and print it with defaults filled in.
    Check {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Read the dataset and write the binary store cache.
    Ingest(RunArgs),
    /// Compute validation statistics for the global agents.
    Prep(RunArgs),
    /// Generate global knowledge (runs earlier stages as needed).
    SummarizeGlobal(RunArgs),
    /// Generate local node profiles.
    SummarizeLocal(RunArgs),
    /// Reflection over surrogate false positives; writes knowledge.json.
    Reflect(RunArgs),
    /// Run predictions for every configured task and mode.
    Predict(RunArgs),
    /// Score predictions into reports.
    Evaluate(RunArgs),
    /// Pair evidence for one query, computed strictly before t.
    Metrics {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        src: u64,
        #[arg(long)]
        dst: u64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        directed: bool,
        /// Include the target edge text when one exists at exactly t.
        #[arg(long)]
        edge_text: bool,
    },
    /// Label consistency over repeated pairs and repeated edge texts.
    AnalyzeConsistency {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        directed: bool,
        /// Minimum share of interactions in repeated groups for a value to be reported.
        #[arg(long, default_value_t = DEFAULT_MIN_REPEATED)]
        min_repeated: f64,
    },
    /// Interaction coverage of the most active nodes.
    AnalyzePareto {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.15)]
        valid_fraction: f64,
    },
    /// Show recall and ranking for one retrieval query of a configured run.
    RecallDebug {
        #[arg(long, short)]
        config: PathBuf,
        /// Query index within the evaluation window.
        #[arg(long, default_value_t = 0)]
        query: usize,
    },
    /// Convert a DTGB dataset directory into the canonical CSV layout.
    ImportDtgb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bipartite: bool,
    },
    /// Write a seeded synthetic dataset in the canonical layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        nodes: usize,
        #[arg(long, default_value_t = 500)]
        edges: usize,
        /// Generate a user-item bipartite graph instead.
        #[arg(long)]
        bipartite: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Invalid(_)) | CliError::Usage(_) => 2,
            CliError::Pipeline(p) if p.is_config() => 2,
            _ => 1,
        }
    }
}

fn load_run(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(&args.config)?;
    cfg.force |= args.force;
    Ok(cfg)
}

fn load_store(d: &DataArgs) -> Result<DyTagStore, CliError> {
    Ok(match d.format {
        Format::Auto => ingest::load_dataset_dir(&d.data, d.bipartite)?,
        Format::Canonical => ingest::ingest_dataset(&ingest::DatasetFiles::in_dir(&d.data, d.bipartite))?,
        Format::Dtgb => DyTagStore::from_parts(ingest::import_dtgb(&d.data, d.bipartite)?)?,
    })
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn stage(args: &RunArgs, target: Stage) -> Result<(), CliError> {
    let cfg = load_run(args)?;
    let outcome = pipeline::run_until(&cfg, target)?;
    for s in &outcome.cached {
        log::info!("reused cached stage {}", s);
    }
    if !outcome.reports.is_empty() {
        print!("{}", dytag_core::eval::render_table(&outcome.reports));
    }
    println!("{}", outcome.out_dir.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}

fn recall_debug(config: &Path, query: usize) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let store = ingest::load_store(&cfg.out_dir.join("store.cbor")).or_else(|_| {
        pipeline::run_until(&cfg, Stage::Ingest)
            .map_err(CliError::from)
            .and_then(|o| Ok(ingest::load_store(&o.out_dir.join("store.cbor"))?))
    })?;
    let split = store.chronological_split(cfg.train_fraction, cfg.valid_fraction)?;
    let knowledge = match &cfg.knowledge_path {
        Some(p) => Some(p.clone()),
        None => Some(cfg.out_dir.join("knowledge.json")).filter(|p| p.is_file()),
    }
    .map(|p| std::fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("{}: {}", p.display(), e))))
    .transpose()?
    .map(|t| KnowledgeStore::from_json(&t).map_err(|e| CliError::Usage(e.to_string())))
    .transpose()?;
    let batches = build_queries(&split, Task::Nr, cfg.eval_window, cfg.batch_size, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let q = batches
        .iter()
        .flatten()
        .find(|q| q.index == query)
        .ok_or_else(|| CliError::Usage(format!("no retrieval query with index {}", query)))?;
    let opts = MetricOptions { direction: if cfg.directed { Direction::Directed } else { Direction::Undirected } };
    let pool = q.pool.iter().map(|d| pair_evidence_with(&store, q.source, *d, q.t, false, opts)).collect();
    let (rules, keys) = match &knowledge {
        Some(k) => (k.thresholds_for(Task::Nr).to_vec(), ranking_keys(&k.global_link)),
        None => (Vec::new(), STRUCTURAL_KEYS.to_vec()),
    };
    let set = rank_candidates(apply_thresholds(q.source, q.t, pool, &rules), &keys);
    println!(
        "query {} source {} at t={} pool {} (knowledge: {})",
        q.index,
        q.source,
        q.t,
        q.pool.len(),
        if knowledge.is_some() { "yes" } else { "no" }
    );
    println!(
        "ranking keys: {}",
        keys.iter().map(|k| format!("{}{}", k.metric, if k.descending { " desc" } else { " asc" })).collect::<Vec<_>>().join(", ")
    );
    for (i, c) in set.candidates.iter().enumerate() {
        println!("{:>3}. node {:<10} HI={} CN={} DNF={}", i + 1, c.dst, c.hi, c.cn, c.dnf());
    }
    println!("excluded {} candidates", set.excluded.len());
    for e in set.excluded.iter().take(10) {
        println!("     node {:<10} by {}", e.node, e.rule.describe());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => stage(&a, Stage::Evaluate),
        Command::Ingest(a) => stage(&a, Stage::Ingest),
        Command::Prep(a) => stage(&a, Stage::Prep),
        Command::SummarizeGlobal(a) => stage(&a, Stage::SummarizeGlobal),
        Command::SummarizeLocal(a) => stage(&a, Stage::SummarizeLocal),
        Command::Reflect(a) => stage(&a, Stage::Reflect),
        Command::Predict(a) => stage(&a, Stage::Predict),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate),
        Command::Check { config } => {
            print!("{}", load_config(&config)?.to_json());
            Ok(())
        }
        Command::Metrics { data, src, dst, t, directed, edge_text } => {
            let store = load_store(&data)?;
            let t = Timestamp::new(t).ok_or_else(|| CliError::Usage(format!("invalid timestamp {}", t)))?;
            let opts = MetricOptions { direction: if directed { Direction::Directed } else { Direction::Undirected } };
            print_json(&pair_evidence_with(&store, NodeId(src), NodeId(dst), t, edge_text, opts));
            Ok(())
        }
        Command::AnalyzeConsistency { data, directed, min_repeated } => {
            if !(0.0..=1.0).contains(&min_repeated) {
                return Err(CliError::Usage("--min-repeated must lie in [0, 1]".into()));
            }
            let store = load_store(&data)?;
            let opts = ConsistencyOptions { min_fraction_repeated: min_repeated, directed };
            print_json(&label_consistency(&store, 0..store.num_edges(), opts));
            Ok(())
        }
        Command::AnalyzePareto { data, fraction, train_fraction, valid_fraction } => {
            let store = load_store(&data)?;
            let split = store.chronological_split(train_fraction, valid_fraction)?;
            print_json(&pareto_coverage(&split, fraction));
            Ok(())
        }
        Command::RecallDebug { config, query } => recall_debug(&config, query),
        Command::ImportDtgb { data, out, bipartite } => {
            let store = DyTagStore::from_parts(ingest::import_dtgb(&data, bipartite)?)?;
            let files = ingest::export_dataset(&store, &out)?;
            println!(
                "{} nodes, {} edges, {} labels -> {}",
                store.num_nodes(),
                store.num_edges(),
                store.num_labels(),
                files.edges.display()
            );
            Ok(())
        }
        Command::Synth { out, seed, nodes, edges, bipartite } => {
            if nodes < 4 || edges == 0 {
                return Err(CliError::Usage("need at least 4 nodes and one edge".into()));
            }
            let parts = if bipartite {
                synth::bipartite_dytag(seed, nodes / 2, nodes - nodes / 2, edges)
            } else {
                synth::community_dytag(seed, nodes, edges)
            };
            let store = DyTagStore::from_parts(parts)?;
            let files = ingest::export_dataset(&store, &out)?;
            println!("{}", files.edges.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log.as_str())).format_timestamp(None).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
