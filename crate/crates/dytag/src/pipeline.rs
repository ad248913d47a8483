//! Stage orchestration, artifact layout and the run manifest.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! store.cbor              ingest
//! stats.json              prep
//! card.json               card
//! global.json             summarize-global
//! local.json              summarize-local
//! knowledge.json          reflect (complete knowledge store)
//! predictions/<task>-<mode>.jsonl
//! reports/<task>-<mode>.json, reports/summary.txt
//! transcript.jsonl
//! manifest.json
//! ```
//!
//! A stage is skipped when the previous manifest lists identical input
//! hashes and its outputs are still on disk with the recorded hashes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use dytag_core::eval::{render_table, EvalError, EvalReport};
use dytag_core::knowledge::{
    build_local_evidence, link_summary_text, run_global_edge_label_summary, run_global_link_summary, run_initial_agent, run_local_summary,
    run_reflection, select_active_nodes, DatasetCard, GlobalEdgeLabelKnowledge, GlobalLinkKnowledge, KnowledgeError, KnowledgeStore,
    NodeProfile, ReflectionOutcome, ThresholdRule, FORMAT_VERSION,
};
use dytag_core::llm::{ChatBackend, Gateway, GatewayError, GenerationSettings, ScriptedBackend};
use dytag_core::metrics::{Direction, MetricOptions};
use dytag_core::predict::{
    build_few_shot, build_queries, collect_trajectories, global_modal_label, run_task, Checkpoints, Executor, Job, PredictContext,
    PredictError, PredictionRecord, PromptMode, Task,
};
use dytag_core::stats::{prepare_global_stats, GlobalStats, StatsError};
use dytag_core::{DyTagStore, NodeId, SplitView, StoreError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackendChoice, DatasetFormat, RunConfig};
use crate::http::{Backoff, HttpBackend, HttpSettings};
use crate::ingest::{self, IngestError};
use crate::rules::{self, RuleFileError};
use crate::transcript::{self, JsonlTranscript, TranscriptError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rules(#[from] RuleFileError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Rules(_))
            || matches!(self, PipelineError::Gateway(GatewayError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_owned(), source }
}

/// Stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Prep,
    Card,
    SummarizeGlobal,
    SummarizeLocal,
    Reflect,
    Predict,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Prep => "prep",
            Stage::Card => "card",
            Stage::SummarizeGlobal => "summarize-global",
            Stage::SummarizeLocal => "summarize-local",
            Stage::Reflect => "reflect",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub path: String,
    pub records: usize,
    /// Order-independent, excludes wall time and latency.
    pub canonical_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub complete: bool,
    pub dataset: String,
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<TranscriptSummary>,
}

impl Manifest {
    pub fn load(path: &Path) -> Option<Manifest> {
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Every output path with its hash.
    pub fn artifacts(&self) -> BTreeMap<&str, &str> {
        self.stages.values().flat_map(|s| s.outputs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).collect()
    }
}

pub fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn text_hash(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // write-then-rename so an interrupted stage never leaves a half file behind
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact { path: path.to_owned(), message: e.to_string() })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), PipelineError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::Artifact { path: path.to_owned(), message: format!("line {}: {}", i + 1, e) })?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Intermediate artifacts

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardArtifact {
    pub description: String,
    pub card: DatasetCard,
    pub digests: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalArtifact {
    pub global_link: GlobalLinkKnowledge,
    pub global_edge_label: GlobalEdgeLabelKnowledge,
    pub thresholds: Vec<ThresholdRule>,
    pub provenance: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalArtifact {
    pub profiles: BTreeMap<NodeId, NodeProfile>,
    pub provenance: BTreeMap<String, Vec<String>>,
}

/// Runs predictions on a bounded rayon pool; results keep query order.
pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    pub fn new(threads: usize) -> Result<RayonExecutor, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {}", e)))?;
        Ok(RayonExecutor { pool })
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

impl Executor for RayonExecutor {
    fn run(&self, n: usize, job: &Job<'_>) -> Vec<Result<PredictionRecord, PredictError>> {
        self.pool.install(|| (0..n).into_par_iter().map(job).collect())
    }
}

pub fn default_description(name: &str, store: &DyTagStore) -> String {
    let labels: Vec<&str> = store.labels().iter().map(|(_, t)| t.as_str()).collect();
    format!(
        "{} is a dynamic graph with {} nodes and {} timestamped edges{}. Nodes carry text descriptions, edges carry message text and one of {} class labels: {}.",
        name,
        store.num_nodes(),
        store.num_edges(),
        if store.is_bipartite() { " between two disjoint node sets" } else { "" },
        labels.len(),
        labels.join(", ")
    )
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Builds the configured backend. Mock backends need the EC last-resort label.
pub fn build_backend(cfg: &RunConfig, global_label: Option<String>) -> Result<Box<dyn ChatBackend>, PipelineError> {
    Ok(match cfg.backend.kind {
        BackendChoice::Mock => match &cfg.backend.rules {
            Some(p) => Box::new(rules::backend_from_file(p, global_label)?),
            None => Box::new(ScriptedBackend::heuristic(global_label)),
        },
        BackendChoice::Replay => {
            let p = cfg.backend.transcript.as_ref().ok_or_else(|| PipelineError::Config("replay backend needs a transcript".into()))?;
            Box::new(transcript::replay_from_file(p)?)
        }
        BackendChoice::Http => {
            let endpoint = cfg.backend.endpoint.as_deref().ok_or_else(|| PipelineError::Config("http backend needs an endpoint".into()))?;
            let mut s = HttpSettings::from_env(endpoint)?;
            s.max_attempts = cfg.backend.max_retries;
            s.backoff = Backoff {
                initial: Duration::from_millis(cfg.backend.backoff_initial_ms),
                max: Duration::from_millis(cfg.backend.backoff_max_ms),
            };
            s.timeout = Duration::from_secs(cfg.backend.timeout_s);
            Box::new(HttpBackend::new(s)?)
        }
    })
}

// ---------------------------------------------------------------------------
// Runner

pub struct Runner<'c> {
    cfg: &'c RunConfig,
    out: PathBuf,
    previous: Option<Manifest>,
    manifest: Manifest,
    settings: GenerationSettings,
    executor: RayonExecutor,
    backend: Option<Box<dyn ChatBackend>>,
    backend_id: Option<String>,
    sink: Option<JsonlTranscript>,
    transcript_path: PathBuf,
}

/// What a run produced, for callers and the CLI.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
    pub reports: Vec<EvalReport>,
    /// Stages answered from cache.
    pub cached: Vec<String>,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    run_until(cfg, Stage::Evaluate)
}

/// Runs every stage up to and including `target`.
pub fn run_until(cfg: &RunConfig, target: Stage) -> Result<RunOutcome, PipelineError> {
    let mut r = Runner::new(cfg)?;
    let res = r.execute(target);
    r.finish(res.is_ok())?;
    let (reports, cached) = res?;
    Ok(RunOutcome { manifest: r.manifest.clone(), out_dir: r.out.clone(), reports, cached })
}

fn opts(cfg: &RunConfig) -> MetricOptions {
    MetricOptions { direction: if cfg.directed { Direction::Directed } else { Direction::Undirected } }
}

impl<'c> Runner<'c> {
    pub fn new(cfg: &'c RunConfig) -> Result<Runner<'c>, PipelineError> {
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let previous = Manifest::load(&out.join(MANIFEST_FILE));
        Ok(Runner {
            cfg,
            transcript_path: cfg.transcript_path.clone().unwrap_or_else(|| out.join("transcript.jsonl")),
            out,
            previous,
            manifest: Manifest {
                format_version: MANIFEST_VERSION,
                complete: false,
                dataset: cfg.dataset.name.clone(),
                config_digest: cfg.digest(),
                stages: BTreeMap::new(),
                transcript: None,
            },
            settings: GenerationSettings { model: cfg.backend.model.clone(), temperature: cfg.temperature, max_tokens: cfg.max_tokens },
            executor: RayonExecutor::new(cfg.backend.max_in_flight)?,
            backend: None,
            backend_id: None,
            sink: None,
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        write_file(&self.out.join(MANIFEST_FILE), &to_json(&self.manifest))
    }

    fn finish(&mut self, ok: bool) -> Result<(), PipelineError> {
        drop(self.sink.take());
        if self.transcript_path.is_file() {
            let recs = transcript::load_transcript(&self.transcript_path)?;
            self.manifest.transcript = Some(TranscriptSummary {
                path: self.rel(&self.transcript_path),
                records: recs.len(),
                canonical_hash: transcript::canonical_hash(&recs),
            });
        }
        self.manifest.complete = ok;
        self.save_manifest()
    }

    /// Runs `body` unless a matching cached record exists. Returns true on a cache hit.
    fn stage(
        &mut self,
        name: &str,
        inputs: BTreeMap<String, String>,
        outputs: &[PathBuf],
        body: impl FnOnce(&mut Self) -> Result<(), PipelineError>,
    ) -> Result<bool, PipelineError> {
        let rels: Vec<String> = outputs.iter().map(|p| self.rel(p)).collect();
        if !self.cfg.force {
            if let Some(prev) = self.previous.as_ref().and_then(|m| m.stages.get(name)) {
                let fresh = prev.inputs == inputs
                    && rels.iter().all(|r| prev.outputs.contains_key(r))
                    && outputs.iter().zip(&rels).all(|(p, r)| file_hash(p).ok().as_deref() == prev.outputs.get(r).map(String::as_str));
                if fresh {
                    log::info!("cache hit: {} (inputs unchanged)", name);
                    self.manifest.stages.insert(name.to_owned(), prev.clone());
                    self.save_manifest()?;
                    return Ok(true);
                }
            }
        }
        log::info!("running stage {}", name);
        body(self)?;
        let mut out_hashes = BTreeMap::new();
        for (p, r) in outputs.iter().zip(rels) {
            out_hashes.insert(r, file_hash(p)?);
        }
        self.manifest.stages.insert(name.to_owned(), StageRecord { inputs, outputs: out_hashes });
        self.save_manifest()?;
        Ok(false)
    }

    fn output_hash(&self, name: &str, path: &Path) -> String {
        self.manifest.stages.get(name).and_then(|s| s.outputs.get(&self.rel(path))).cloned().unwrap_or_default()
    }

    fn ensure_backend(&mut self, store: &DyTagStore) -> Result<(), PipelineError> {
        if self.backend.is_some() {
            return Ok(());
        }
        let split = store.chronological_split(self.cfg.train_fraction, self.cfg.valid_fraction)?;
        let label = global_modal_label(&split).and_then(|l| store.label_text(l)).map(str::to_owned);
        self.backend = Some(build_backend(self.cfg, label)?);
        let mut id = serde_json::json!({
            "kind": self.cfg.backend.kind,
            "model": self.settings.model,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
        });
        match self.cfg.backend.kind {
            BackendChoice::Mock => {
                id["rules"] = match &self.cfg.backend.rules {
                    Some(p) => file_hash(p)?.into(),
                    None => "heuristic".into(),
                }
            }
            BackendChoice::Replay => id["transcript"] = file_hash(self.cfg.backend.transcript.as_ref().expect("validated"))?.into(),
            BackendChoice::Http => id["endpoint"] = self.cfg.backend.endpoint.clone().unwrap_or_default().into(),
        }
        self.backend_id = Some(text_hash(&id.to_string()));
        self.sink = Some(JsonlTranscript::open(&self.transcript_path).map_err(io_err(&self.transcript_path))?);
        Ok(())
    }

    fn gateway(&self) -> Gateway<'_> {
        let backend = self.backend.as_deref().expect("backend built before use");
        let mut gw = Gateway::new(backend, &self.settings).with_clock(&now_ms);
        if let Some(s) = &self.sink {
            gw = gw.with_transcript(s);
        }
        gw
    }

    fn base_inputs(&self, pairs: &[(&str, String)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect()
    }

    fn execute(&mut self, target: Stage) -> Result<(Vec<EvalReport>, Vec<String>), PipelineError> {
        let cfg = self.cfg;
        let mut cached = Vec::new();

        // ingest
        let store_path = self.out.join("store.cbor");
        let mut inputs =
            self.base_inputs(&[("bipartite", cfg.dataset.bipartite.to_string()), ("format", format!("{:?}", cfg.dataset.format))]);
        for f in dataset_files(&cfg.dataset.dir)? {
            inputs.insert(format!("file:{}", f.file_name().unwrap_or_default().to_string_lossy()), file_hash(&f)?);
        }
        let hit = self.stage(Stage::Ingest.name(), inputs, &[store_path.clone()], |r| {
            let d = &r.cfg.dataset;
            let store = match d.format {
                DatasetFormat::Auto => ingest::load_dataset_dir(&d.dir, d.bipartite)?,
                DatasetFormat::Canonical => {
                    let mut files = ingest::DatasetFiles::in_dir(&d.dir, d.bipartite);
                    if files.edge_texts.as_ref().is_some_and(|p| !p.is_file()) {
                        files.edge_texts = None;
                    }
                    ingest::ingest_dataset(&files)?
                }
                DatasetFormat::Dtgb => DyTagStore::from_parts(ingest::import_dtgb(&d.dir, d.bipartite)?)?,
            };
            ingest::save_store(&store, &store_path)?;
            Ok(())
        })?;
        if hit {
            cached.push(Stage::Ingest.name().to_string());
        }
        let store = ingest::load_store(&store_path)?;
        let store_hash = self.output_hash(Stage::Ingest.name(), &store_path);
        let split = store.chronological_split(cfg.train_fraction, cfg.valid_fraction)?;
        let split_key = format!("{}/{}", cfg.train_fraction, cfg.valid_fraction);
        if target == Stage::Ingest {
            return Ok((Vec::new(), cached));
        }

        // prep
        let stats_path = self.out.join("stats.json");
        let inputs = self.base_inputs(&[
            ("store", store_hash.clone()),
            ("seed", cfg.seed.to_string()),
            ("split", split_key.clone()),
            ("text_count", cfg.text_count.to_string()),
            ("truncation", cfg.truncation.to_string()),
            ("directed", cfg.directed.to_string()),
        ]);
        let hit = self.stage(Stage::Prep.name(), inputs, &[stats_path.clone()], |_| {
            let stats = prepare_global_stats(&split, cfg.seed, cfg.text_count, cfg.truncation, opts(cfg))?;
            write_file(&stats_path, &to_json(&stats))
        })?;
        if hit {
            cached.push(Stage::Prep.name().to_string());
        }
        let stats_hash = self.output_hash(Stage::Prep.name(), &stats_path);
        if target == Stage::Prep {
            return Ok((Vec::new(), cached));
        }

        self.ensure_backend(&store)?;
        let backend_id = self.backend_id.clone().unwrap_or_default();
        let wants_knowledge = cfg.modes.contains(&PromptMode::Gad) || (Stage::SummarizeGlobal..=Stage::Reflect).contains(&target);

        // knowledge
        let (card, knowledge, knowledge_hash) = if let Some(kp) = &cfg.knowledge_path {
            let text = fs::read_to_string(kp).map_err(io_err(kp))?;
            let k = KnowledgeStore::from_json(&text)?;
            log::info!("using knowledge from {}", kp.display());
            (k.dataset_card.clone(), Some(k), text_hash(&text))
        } else {
            let card_path = self.out.join("card.json");
            let description = cfg.dataset.description.clone().unwrap_or_else(|| default_description(&cfg.dataset.name, &store));
            let inputs = self.base_inputs(&[
                ("store", store_hash.clone()),
                ("description", text_hash(&description)),
                ("backend", backend_id.clone()),
            ]);
            let hit = self.stage(Stage::Card.name(), inputs, &[card_path.clone()], |r| {
                let (card, digests) = run_initial_agent(&description, &r.gateway())?;
                write_file(&card_path, &to_json(&CardArtifact { description: description.clone(), card, digests }))
            })?;
            if hit {
                cached.push(Stage::Card.name().to_string());
            }
            let card_art: CardArtifact = read_json(&card_path)?;
            let card_hash = self.output_hash(Stage::Card.name(), &card_path);
            if target == Stage::Card {
                return Ok((Vec::new(), cached));
            }
            if wants_knowledge {
                let (k, h, hits) = self.knowledge_stages(
                    target,
                    &store,
                    &split,
                    &card_art,
                    &card_hash,
                    &stats_path,
                    &stats_hash,
                    &store_hash,
                    &split_key,
                )?;
                cached.extend(hits);
                match k {
                    Some(k) => (card_art.card, Some(k), h),
                    None => return Ok((Vec::new(), cached)),
                }
            } else {
                (card_art.card, None, card_hash)
            }
        };
        if target < Stage::Predict {
            return Ok((Vec::new(), cached));
        }

        // predict + evaluate
        let fallback = global_modal_label(&split);
        let mut reports = Vec::new();
        for &task in &cfg.tasks {
            for &mode in &cfg.modes {
                let tag = format!("{}-{}", task.name(), mode.name());
                let pred_path = self.out.join("predictions").join(format!("{}.jsonl", tag));
                let inputs = self.base_inputs(&[
                    ("store", store_hash.clone()),
                    ("knowledge", knowledge_hash.clone()),
                    ("backend", backend_id.clone()),
                    ("seed", cfg.seed.to_string()),
                    ("split", split_key.clone()),
                    ("eval_window", cfg.eval_window.to_string()),
                    ("batch_size", cfg.batch_size.to_string()),
                    ("use_edge_text", cfg.use_edge_text.to_string()),
                    ("directed", cfg.directed.to_string()),
                ]);
                let ckpt_dir = self.out.join("predictions").join(format!(".ckpt-{}-{}", tag, &text_hash(&format!("{:?}", inputs))[..16]));
                let stage_name = format!("predict/{}", tag);
                let hit = self.stage(&stage_name, inputs, &[pred_path.clone()], |r| {
                    let base = PredictContext::new(&store, &card, mode)
                        .with_edge_text(cfg.use_edge_text)
                        .with_fallback_label(fallback)
                        .with_options(opts(cfg));
                    let base = match (&knowledge, mode) {
                        (Some(k), _) => base.with_knowledge(k),
                        (None, PromptMode::Gad) => return Err(PredictError::MissingKnowledge(mode).into()),
                        (None, _) => base,
                    };
                    let examples =
                        if mode.is_few_shot() { build_few_shot(&base, &split, task, cfg.batch_size, cfg.seed)? } else { Vec::new() };
                    let ctx = base.with_examples(&examples);
                    let batches = build_queries(&split, task, cfg.eval_window, cfg.batch_size, cfg.seed)?;
                    log::info!("{}: {} queries in {} batches", tag, batches.iter().map(Vec::len).sum::<usize>(), batches.len());
                    let load = |b: usize| read_records(&ckpt_dir.join(format!("batch-{}.jsonl", b))).ok();
                    let mut save = |b: usize, recs: &[PredictionRecord]| {
                        write_records(&ckpt_dir.join(format!("batch-{}.jsonl", b)), recs).map_err(|e| e.to_string())
                    };
                    let records = run_task(&ctx, &r.gateway(), &batches, &r.executor, Some(Checkpoints { load: &load, save: &mut save }))?;
                    write_records(&pred_path, &records)?;
                    let _ = fs::remove_dir_all(&ckpt_dir);
                    Ok(())
                })?;
                if hit {
                    cached.push(stage_name.clone());
                }
                if target < Stage::Evaluate {
                    continue;
                }
                let report_path = self.out.join("reports").join(format!("{}.json", tag));
                let inputs = self.base_inputs(&[
                    ("predictions", self.output_hash(&stage_name, &pred_path)),
                    ("config_digest", self.manifest.config_digest.clone()),
                    ("per_batch", cfg.per_batch.to_string()),
                ]);
                let eval_name = format!("evaluate/{}", tag);
                let digest = self.manifest.config_digest.clone();
                let hit = self.stage(&eval_name, inputs, &[report_path.clone()], |_| {
                    let records = read_records(&pred_path)?;
                    let report = EvalReport::build(task, mode, &cfg.dataset.name, &digest, &records, cfg.per_batch)?;
                    write_file(&report_path, &report.to_json())
                })?;
                if hit {
                    cached.push(eval_name.clone());
                }
                reports.push(read_json::<EvalReport>(&report_path)?);
            }
        }
        if target >= Stage::Evaluate {
            let summary_path = self.out.join("reports").join("summary.txt");
            let table = render_table(&reports);
            let inputs = self.base_inputs(&[("table", text_hash(&table))]);
            self.stage("evaluate/summary", inputs, &[summary_path.clone()], |_| write_file(&summary_path, &table))?;
        }
        Ok((reports, cached))
    }

    #[allow(clippy::too_many_arguments)]
    fn knowledge_stages(
        &mut self,
        target: Stage,
        store: &DyTagStore,
        split: &SplitView<'_>,
        card: &CardArtifact,
        card_hash: &str,
        stats_path: &Path,
        stats_hash: &str,
        store_hash: &str,
        split_key: &str,
    ) -> Result<(Option<KnowledgeStore>, String, Vec<String>), PipelineError> {
        let cfg = self.cfg;
        let backend_id = self.backend_id.clone().unwrap_or_default();
        let mut hits = Vec::new();

        let global_path = self.out.join("global.json");
        let inputs = self.base_inputs(&[("card", card_hash.to_owned()), ("stats", stats_hash.to_owned()), ("backend", backend_id.clone())]);
        if self.stage(Stage::SummarizeGlobal.name(), inputs, &[global_path.clone()], |r| {
            let stats: GlobalStats = read_json(stats_path)?;
            let art = summarize_global(&card.card, &stats, &r.gateway())?;
            write_file(&global_path, &to_json(&art))
        })? {
            hits.push(Stage::SummarizeGlobal.name().to_owned());
        }
        let global_hash = self.output_hash(Stage::SummarizeGlobal.name(), &global_path);
        if target == Stage::SummarizeGlobal {
            return Ok((None, global_hash, hits));
        }

        let local_path = self.out.join("local.json");
        let inputs = self.base_inputs(&[
            ("card", card_hash.to_owned()),
            ("store", store_hash.to_owned()),
            ("split", split_key.to_owned()),
            ("local_fraction", cfg.local_fraction.to_string()),
            ("local_cap", cfg.local_cap.to_string()),
            ("truncation", cfg.truncation.to_string()),
            ("directed", cfg.directed.to_string()),
            ("backend", backend_id.clone()),
        ]);
        if self.stage(Stage::SummarizeLocal.name(), inputs, &[local_path.clone()], |r| {
            let art = summarize_local(&card.card, split, cfg, &r.gateway(), &r.executor)?;
            write_file(&local_path, &to_json(&art))
        })? {
            hits.push(Stage::SummarizeLocal.name().to_owned());
        }
        let local_hash = self.output_hash(Stage::SummarizeLocal.name(), &local_path);
        if target == Stage::SummarizeLocal {
            return Ok((None, local_hash, hits));
        }

        let knowledge_path = self.out.join("knowledge.json");
        let inputs = self.base_inputs(&[
            ("card", card_hash.to_owned()),
            ("global", global_hash),
            ("local", local_hash),
            ("stats", stats_hash.to_owned()),
            ("store", store_hash.to_owned()),
            ("trajectories", cfg.trajectories.to_string()),
            ("seed", cfg.seed.to_string()),
            ("directed", cfg.directed.to_string()),
            ("backend", backend_id),
        ]);
        if self.stage(Stage::Reflect.name(), inputs, &[knowledge_path.clone()], |r| {
            let global: GlobalArtifact = read_json(&global_path)?;
            let local: LocalArtifact = read_json(&local_path)?;
            let stats: GlobalStats = read_json(stats_path)?;
            let mut k = assemble_knowledge(card, global, local);
            reflect(&mut k, store, &stats, cfg.trajectories, cfg.seed, opts(cfg), &r.gateway())?;
            write_file(&knowledge_path, &k.to_json())
        })? {
            hits.push(Stage::Reflect.name().to_owned());
        }
        let text = fs::read_to_string(&knowledge_path).map_err(io_err(&knowledge_path))?;
        let k = KnowledgeStore::from_json(&text)?;
        Ok((Some(k), self.output_hash(Stage::Reflect.name(), &knowledge_path), hits))
    }
}

/// Files whose content identifies the dataset, in name order.
fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::Config(format!("no CSV files in dataset directory {}", dir.display())));
    }
    Ok(files)
}

// ---------------------------------------------------------------------------
// Knowledge generation

pub fn summarize_global(card: &DatasetCard, stats: &GlobalStats, gw: &Gateway<'_>) -> Result<GlobalArtifact, PipelineError> {
    let link = run_global_link_summary(card, stats, gw)?;
    let label = run_global_edge_label_summary(card, stats, gw)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("global_link.structure".to_owned(), link.structure_digests);
    provenance.insert("global_link.text".to_owned(), link.text_digests);
    provenance.insert("global_edge_label.edge_text".to_owned(), label.edge_text_digests);
    provenance.insert("global_edge_label.eld".to_owned(), label.eld_digests);
    Ok(GlobalArtifact { global_link: link.knowledge, global_edge_label: label.knowledge, thresholds: link.thresholds, provenance })
}

pub fn summarize_local(
    card: &DatasetCard,
    split: &SplitView<'_>,
    cfg: &RunConfig,
    gw: &Gateway<'_>,
    executor: &RayonExecutor,
) -> Result<LocalArtifact, PipelineError> {
    let nodes = select_active_nodes(split, cfg.local_fraction);
    log::info!("local summaries for {} active nodes", nodes.len());
    let results: Vec<Result<Option<(NodeProfile, Vec<String>)>, KnowledgeError>> = executor.install(|| {
        nodes
            .par_iter()
            .map(|n| {
                let ev = build_local_evidence(split, *n, cfg.local_cap, cfg.truncation, opts(cfg));
                run_local_summary(card, &ev, gw)
            })
            .collect()
    });
    let mut art = LocalArtifact::default();
    for (n, res) in nodes.into_iter().zip(results) {
        if let Some((profile, digests)) = res? {
            art.profiles.insert(n, profile);
            art.provenance.insert(format!("local_profiles.{}", n), digests);
        }
    }
    Ok(art)
}

pub fn assemble_knowledge(card: &CardArtifact, global: GlobalArtifact, local: LocalArtifact) -> KnowledgeStore {
    let mut k = KnowledgeStore {
        format_version: FORMAT_VERSION,
        dataset_card: card.card.clone(),
        global_link: global.global_link,
        global_edge_label: global.global_edge_label,
        thresholds: BTreeMap::new(),
        local_profiles: local.profiles,
        reflection: BTreeMap::new(),
        provenance: BTreeMap::new(),
    };
    if !global.thresholds.is_empty() {
        k.thresholds.insert(Task::Nr, global.thresholds);
    }
    k.add_provenance("dataset_card", &card.digests);
    for (p, d) in global.provenance.into_iter().chain(local.provenance) {
        k.add_provenance(p, &d);
    }
    k
}

/// Surrogate LP predictions on validation negatives, then one reflection
/// call; the outcome applies to both link tasks.
pub fn reflect(
    k: &mut KnowledgeStore,
    store: &DyTagStore,
    stats: &GlobalStats,
    trajectories: usize,
    seed: u64,
    opts: MetricOptions,
    gw: &Gateway<'_>,
) -> Result<(), PipelineError> {
    let outcome = if trajectories == 0 || stats.negatives.is_empty() {
        ReflectionOutcome::not_significant()
    } else {
        let (trajs, accuracy, digests) = {
            let ctx = PredictContext::new(store, &k.dataset_card, PromptMode::Gad).with_knowledge(k).with_options(opts);
            let (trajs, accuracy) = collect_trajectories(&ctx, gw, &stats.negatives, trajectories, seed)?;
            let digests: Vec<String> = trajs.iter().flat_map(|t| t.digests.iter().cloned()).collect();
            (trajs, accuracy, digests)
        };
        log::info!("reflection: surrogate accuracy {:.4} over {} negatives", accuracy, trajs.len());
        k.add_provenance("reflection.trajectories", &digests);
        let summary = link_summary_text(&k.global_link, k.global_link.selection(), None).map_err(KnowledgeError::from)?;
        let (outcome, d) = run_reflection(&summary, &trajs, accuracy, gw)?;
        k.add_provenance("reflection", &d);
        outcome
    };
    k.reflection.insert(Task::Lp, outcome.clone());
    k.reflection.insert(Task::Nr, outcome);
    Ok(())
}
