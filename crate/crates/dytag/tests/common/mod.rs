//! Helpers shared by the end-to-end tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dytag::config::{load_config, RunConfig};
use dytag::ingest::{export_dataset, load_store};
use dytag::pipeline::{read_records, run_pipeline, RunOutcome};
use dytag::transcript::load_transcript;
use dytag_core::eval::EvalReport;
use dytag_core::knowledge::KnowledgeStore;
use dytag_core::llm::{Gateway, GenerationSettings, MemoryTranscript, ScriptedBackend};
use dytag_core::predict::{
    build_few_shot, global_modal_label, predict, prepare_direct, PredictContext, PredictionRecord, PromptMode, Task, Truth,
};
use dytag_core::synth::community_dytag;
use dytag_core::{DyTagStore, LabelId, MetricOptions, NodeId};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

pub fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {}", path.display(), e))
}

/// Mock-backed config over a freshly exported synthetic dataset.
pub fn synthetic_run(root: &Path, name: &str, seed: u64, nodes: usize, edges: usize) -> RunConfig {
    let data = root.join("data");
    let store = DyTagStore::from_parts(community_dytag(seed, nodes, edges)).expect("synthetic store");
    export_dataset(&store, &data).expect("export");
    RunConfig::for_dataset(&data, name, &root.join("out"))
}

fn tree_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// determinism and the link oracle

/// Scan of `edges.csv`: past interactions of the unordered pair and common
/// neighbours, both strictly before `t`.
pub struct EdgeList {
    rows: Vec<(u64, u64, f64)>,
}

impl EdgeList {
    pub fn read(path: &Path) -> Result<EdgeList, String> {
        let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let f = |i: usize| rec.get(i).unwrap_or("").to_string();
            rows.push((f(0).parse().map_err(|_| "bad src")?, f(1).parse().map_err(|_| "bad dst")?, f(2).parse().map_err(|_| "bad ts")?));
        }
        Ok(EdgeList { rows })
    }

    pub fn hi(&self, u: u64, v: u64, t: f64) -> usize {
        self.rows.iter().filter(|&&(a, b, ts)| ts < t && ((a == u && b == v) || (a == v && b == u))).count()
    }

    fn neighbours(&self, n: u64, t: f64) -> BTreeSet<u64> {
        let mut s = BTreeSet::new();
        for &(a, b, ts) in &self.rows {
            if ts < t {
                if a == n {
                    s.insert(b);
                }
                if b == n {
                    s.insert(a);
                }
            }
        }
        s
    }

    pub fn cn(&self, u: u64, v: u64, t: f64) -> usize {
        self.neighbours(u, t).intersection(&self.neighbours(v, t)).count()
    }
}

/// LP accuracy recomputed from the raw edge list: predict a link when one of
/// the metrics shown to the model is positive.
pub fn link_oracle_accuracy(edges: &EdgeList, records: &[PredictionRecord], use_hi: bool, use_cn: bool) -> Result<f64, String> {
    let mut correct = 0usize;
    for r in records {
        let q = &r.query;
        let dst = q.destination.ok_or("link query without destination")?;
        let t = q.t.value();
        let predicted = (use_hi && edges.hi(q.source.0, dst.0, t) > 0) || (use_cn && edges.cn(q.source.0, dst.0, t) > 0);
        let truth = match q.truth {
            Truth::Link(x) => x == 1,
            _ => return Err("link record with non-link truth".into()),
        };
        correct += usize::from(predicted == truth);
    }
    Ok(correct as f64 / records.len() as f64)
}

pub struct DeterminismSummary {
    pub cfg: RunConfig,
    pub outcome: RunOutcome,
    pub gad_accuracy: f64,
    pub structure_accuracy: f64,
}

/// Runs the same config into two output directories and compares every
/// prediction file, report and manifest byte for byte; then checks LP
/// accuracy against the edge-list oracle.
pub fn determinism_check(root: &Path) -> Result<DeterminismSummary, String> {
    let mut cfg = synthetic_run(root, "synthetic", 7, 60, 500);
    cfg.seed = 7;
    cfg.eval_window = 64;
    cfg.batch_size = 16;
    cfg.modes = PromptMode::ALL.to_vec();
    let first = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let mut again = cfg.clone();
    again.out_dir = root.join("out-again");
    run_pipeline(&again).map_err(|e| e.to_string())?;

    let mut compared = 0;
    for a in tree_files(&cfg.out_dir) {
        let rel = a.strip_prefix(&cfg.out_dir).unwrap();
        let name = rel.to_string_lossy();
        if !(name.starts_with("predictions/") || name.starts_with("reports/") || name == "manifest.json" || name == "knowledge.json") {
            continue;
        }
        let b = again.out_dir.join(rel);
        if read(&a)? != read(&b)? {
            return Err(format!("{} differs between runs", name));
        }
        compared += 1;
    }
    // 5 modes x 3 tasks of predictions and reports, the summary, manifest, knowledge
    if compared != 33 {
        return Err(format!("compared {} files, expected 33", compared));
    }

    let edges = EdgeList::read(&cfg.dataset.dir.join("edges.csv"))?;
    let k = KnowledgeStore::from_json(&String::from_utf8_lossy(&read(&cfg.out_dir.join("knowledge.json"))?)).map_err(|e| e.to_string())?;
    let sel = k.global_link.selection();
    let mut acc = [0.0; 2];
    for (i, (mode, hi, cn)) in [("gad", sel.hi, sel.cn), ("structure", true, true)].into_iter().enumerate() {
        let records = read_records(&cfg.out_dir.join(format!("predictions/lp-{}.jsonl", mode))).map_err(|e| e.to_string())?;
        let report: EvalReport =
            serde_json::from_slice(&read(&cfg.out_dir.join(format!("reports/lp-{}.json", mode)))?).map_err(|e| e.to_string())?;
        let oracle = link_oracle_accuracy(&edges, &records, hi, cn)?;
        let got = report.metrics["accuracy"];
        if (oracle - got).abs() > 1e-12 {
            return Err(format!("lp-{} accuracy {} but the edge-list oracle gives {}", mode, got, oracle));
        }
        acc[i] = got;
    }
    Ok(DeterminismSummary { cfg, outcome: first, gad_accuracy: acc[0], structure_accuracy: acc[1] })
}

pub fn reports_in(out_dir: &Path) -> Result<Vec<EvalReport>, String> {
    let mut out = Vec::new();
    for p in tree_files(&out_dir.join("reports")) {
        if p.extension().is_some_and(|x| x == "json") {
            out.push(serde_json::from_slice(&read(&p)?).map_err(|e| format!("{}: {}", p.display(), e))?);
        }
    }
    Ok(out)
}

/// Every report's hits@k must be non-decreasing in k.
pub fn hits_monotone(reports: &[EvalReport]) -> Result<usize, String> {
    let mut n = 0;
    for r in reports.iter().filter(|r| r.task == Task::Nr) {
        let h = |k: &str| r.metrics.get(k).copied().ok_or(format!("{} missing from {:?} report", k, r.mode));
        if !(h("hits@1")? <= h("hits@3")? && h("hits@3")? <= h("hits@10")?) {
            return Err(format!("hits not monotone in {:?} report: {:?}", r.mode, r.metrics));
        }
        n += 1;
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// prompt hygiene

fn flipped(q: &dytag_core::predict::TaskQuery, store: &DyTagStore) -> Truth {
    match q.truth {
        Truth::Link(x) => Truth::Link(1 - x),
        Truth::Positive(p) => Truth::Positive(q.pool.iter().copied().find(|n| *n != p).unwrap_or(NodeId(p.0 + 1))),
        Truth::Label(l) => {
            let other = store.labels().iter().map(|(id, _)| *id).find(|id| *id != l);
            Truth::Label(other.unwrap_or(LabelId(l.0 + 1)))
        }
    }
}

/// Re-answers every recorded query of a finished run twice, once as recorded
/// and once with its ground truth replaced, and requires identical requests.
/// A prompt that leaked the truth would change with it.
pub fn hygiene_check(cfg: &RunConfig) -> Result<usize, String> {
    let store = load_store(&cfg.out_dir.join("store.cbor")).map_err(|e| e.to_string())?;
    let split = store.chronological_split(cfg.train_fraction, cfg.valid_fraction).map_err(|e| e.to_string())?;
    let knowledge = match fs::read_to_string(cfg.out_dir.join("knowledge.json")) {
        Ok(t) => Some(KnowledgeStore::from_json(&t).map_err(|e| e.to_string())?),
        Err(_) => None,
    };
    let card = match &knowledge {
        Some(k) => k.dataset_card.clone(),
        None => {
            let v: serde_json::Value = serde_json::from_slice(&read(&cfg.out_dir.join("card.json"))?).map_err(|e| e.to_string())?;
            serde_json::from_value(v["card"].clone()).map_err(|e| e.to_string())?
        }
    };
    let fallback = global_modal_label(&split);
    let backend = ScriptedBackend::heuristic(fallback.and_then(|l| store.label_text(l)).map(str::to_owned));
    let settings = GenerationSettings { model: cfg.backend.model.clone(), temperature: cfg.temperature, max_tokens: cfg.max_tokens };
    let recorded: BTreeSet<String> =
        load_transcript(&cfg.out_dir.join("transcript.jsonl")).map_err(|e| e.to_string())?.into_iter().map(|r| r.request_digest).collect();
    let opts = MetricOptions::default();

    let mut checked = 0;
    for &task in &cfg.tasks {
        for &mode in &cfg.modes {
            let tag = format!("{}-{}", task.name(), mode.name());
            let records = read_records(&cfg.out_dir.join(format!("predictions/{}.jsonl", tag))).map_err(|e| e.to_string())?;
            let mut base =
                PredictContext::new(&store, &card, mode).with_edge_text(cfg.use_edge_text).with_fallback_label(fallback).with_options(opts);
            if let Some(k) = &knowledge {
                base = base.with_knowledge(k);
            }
            let examples = if mode.is_few_shot() {
                build_few_shot(&base, &split, task, cfg.batch_size, cfg.seed).map_err(|e| e.to_string())?
            } else {
                Vec::new()
            };
            let ctx = base.with_examples(&examples);
            for r in &records {
                if r.transcript_digests.iter().any(|d| !recorded.contains(d)) {
                    return Err(format!("{} query {}: digest not in the run transcript", tag, r.query.index));
                }
                let mut texts = Vec::new();
                for truth in [r.query.truth, flipped(&r.query, &store)] {
                    let mut q = r.query.clone();
                    q.truth = truth;
                    let sink = MemoryTranscript::default();
                    let gw = Gateway::new(&backend, &settings).with_transcript(&sink);
                    let again =
                        predict(&ctx, &gw, &q, prepare_direct(&ctx, &q)).map_err(|e| format!("{} query {}: {}", tag, q.index, e))?;
                    if again.transcript_digests != r.transcript_digests {
                        return Err(format!("{} query {}: requests change with the ground truth", tag, q.index));
                    }
                    texts.push(sink.records().into_iter().map(|rec| rec.request.prompt_text()).collect::<Vec<_>>());
                }
                if texts[0] != texts[1] {
                    return Err(format!("{} query {}: prompt text depends on the ground truth", tag, r.query.index));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// replay fixture

pub const FIXTURE_CONFIG: &str = "config.json";

fn fixture_config_json(kind: &str) -> serde_json::Value {
    let mut backend = serde_json::json!({"kind": kind, "model": "mock-heuristic"});
    if kind == "replay" {
        backend["transcript"] = "transcript.jsonl".into();
    }
    serde_json::json!({
        "dataset": {"name": "replay-fixture", "dir": "data"},
        "backend": backend,
        "seed": 7,
        "eval_window": 64,
        "batch_size": 16,
        "modes": ["gad"],
        "trajectories": 10,
        "out_dir": "out"
    })
}

/// Records a mock run and writes data, config, transcript and expected outputs.
pub fn regenerate_fixture(dir: &Path) -> Result<(), String> {
    let _ = fs::remove_dir_all(dir);
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = DyTagStore::from_parts(community_dytag(11, 40, 400)).map_err(|e| e.to_string())?;
    export_dataset(&store, &dir.join("data")).map_err(|e| e.to_string())?;
    // recorded with the mock next to the data, then replaced by the replay config
    let record_cfg = dir.join(FIXTURE_CONFIG);
    fs::write(&record_cfg, serde_json::to_string_pretty(&fixture_config_json("mock")).unwrap()).map_err(|e| e.to_string())?;
    let mut cfg = load_config(&record_cfg).map_err(|e| e.to_string())?;
    cfg.out_dir = work.path().join("out");
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;

    fs::create_dir_all(dir.join("expected/reports")).map_err(|e| e.to_string())?;
    fs::copy(out.out_dir.join("transcript.jsonl"), dir.join("transcript.jsonl")).map_err(|e| e.to_string())?;
    fs::copy(out.out_dir.join("knowledge.json"), dir.join("expected/knowledge.json")).map_err(|e| e.to_string())?;
    for task in ["lp", "nr", "ec"] {
        let name = format!("{}-gad.json", task);
        fs::copy(out.out_dir.join("reports").join(&name), dir.join("expected/reports").join(&name)).map_err(|e| e.to_string())?;
    }
    let text = serde_json::to_string_pretty(&fixture_config_json("replay")).unwrap() + "\n";
    fs::write(dir.join(FIXTURE_CONFIG), text).map_err(|e| e.to_string())
}

/// Replays the committed transcript and compares outputs with the recorded ones.
pub fn replay_check(out_dir: &Path) -> Result<(RunConfig, usize), String> {
    let dir = fixture_dir();
    let mut cfg = load_config(&dir.join(FIXTURE_CONFIG)).map_err(|e| e.to_string())?;
    cfg.out_dir = out_dir.to_path_buf();
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    if !out.cached.is_empty() {
        return Err(format!("fresh replay reused stages {:?}", out.cached));
    }
    let mut compared = 0;
    for rel in ["knowledge.json", "reports/lp-gad.json", "reports/nr-gad.json", "reports/ec-gad.json"] {
        let expected = dir.join("expected").join(rel);
        if read(&out.out_dir.join(rel))? != read(&expected)? {
            return Err(format!("replayed {} differs from {}", rel, expected.display()));
        }
        compared += 1;
    }
    let recorded = load_transcript(&dir.join("transcript.jsonl")).map_err(|e| e.to_string())?.len();
    let replayed = out.manifest.transcript.as_ref().map(|t| t.records).unwrap_or(0);
    if replayed != recorded {
        return Err(format!("replay made {} calls, the recording has {}", replayed, recorded));
    }
    Ok((cfg, compared))
}
