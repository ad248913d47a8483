//! Predictor prompts, answers and fallbacks for the three tasks.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::graph::{DyTagStore, LabelId, NodeId, SplitView, Timestamp};
use crate::knowledge::{
    edge_label_summary_text, is_not_significant, link_summary_text, DatasetCard, EdgeSelection, KnowledgeStore, LinkSelection, Trajectory,
};
use crate::llm::{ChatMessage, Gateway, GatewayError, Schema};
use crate::metrics::{
    pair_evidence_with, EdgeLabelDistribution, EvidenceCursor, MetricOptions, MetricsError, NodeActivity, PairEvidence, PairQuery,
};
use crate::prompt::{render_section, PromptError, Vars, BLOCKS, PREDICTOR};
use crate::recall::{apply_thresholds, default_recall, rank_candidates, ranking_keys, STRUCTURAL_KEYS};
use crate::rng::SeededRng;
use crate::stats::{draw_negative, eligible_destinations};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lp,
    Nr,
    Ec,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Lp, Task::Nr, Task::Ec];

    pub fn name(self) -> &'static str {
        match self {
            Task::Lp => "lp",
            Task::Nr => "nr",
            Task::Ec => "ec",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lp" => Some(Task::Lp),
            "nr" => Some(Task::Nr),
            "ec" => Some(Task::Ec),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which evidence the predictor prompt carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "text-fewshot")]
    TextFewShot,
    #[serde(rename = "structure")]
    Structure,
    #[serde(rename = "structure-fewshot")]
    StructureFewShot,
    #[serde(rename = "gad")]
    Gad,
}

impl PromptMode {
    pub const ALL: [PromptMode; 5] =
        [PromptMode::Text, PromptMode::TextFewShot, PromptMode::Structure, PromptMode::StructureFewShot, PromptMode::Gad];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Text => "text",
            PromptMode::TextFewShot => "text-fewshot",
            PromptMode::Structure => "structure",
            PromptMode::StructureFewShot => "structure-fewshot",
            PromptMode::Gad => "gad",
        }
    }

    pub fn parse(s: &str) -> Option<PromptMode> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        PromptMode::ALL.into_iter().find(|m| m.name() == s || m.name().replace('-', "") == s.replace('-', ""))
    }

    pub fn is_few_shot(self) -> bool {
        matches!(self, PromptMode::TextFewShot | PromptMode::StructureFewShot)
    }

    fn is_text_only(self) -> bool {
        matches!(self, PromptMode::Text | PromptMode::TextFewShot)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground truth of a query. Kept for scoring; never rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Link(u8),
    Positive(NodeId),
    Label(LabelId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub task: Task,
    pub index: usize,
    pub batch: usize,
    pub source: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<NodeId>,
    /// Retrieval pool: the positive plus sampled negatives, ascending by id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool: Vec<NodeId>,
    pub t: Timestamp,
    pub truth: Truth,
}

impl TaskQuery {
    fn pair(&self) -> PairQuery {
        PairQuery::new(self.source, self.destination.unwrap_or(self.source), self.t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub node: NodeId,
    /// `None` when the ranking fell back to recall order.
    pub likelihood: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Link(u8),
    Retrieval {
        ranking: Vec<RankedCandidate>,
        /// 1-based, ties counted against the positive; `pool_size + 1` when it was not recalled.
        positive_rank: usize,
        pool_size: usize,
    },
    Label(LabelId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query: TaskQuery,
    pub mode: PromptMode,
    pub answer: Answer,
    pub fallback_used: bool,
    pub transcript_digests: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("mode '{0}' needs global knowledge")]
    MissingKnowledge(PromptMode),
    #[error("query {index} is not a {task} query")]
    TaskMismatch { index: usize, task: Task },
    #[error("no negative destination available for source {0}")]
    NoNegative(NodeId),
    #[error("store has no edge labels")]
    NoLabels,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One rendered in-context example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub body: String,
    pub answer: String,
}

/// Everything a prediction call needs besides the query.
#[derive(Clone, Copy, Debug)]
pub struct PredictContext<'a> {
    pub store: &'a DyTagStore,
    pub card: &'a DatasetCard,
    pub knowledge: Option<&'a KnowledgeStore>,
    pub mode: PromptMode,
    /// Edge-text variant of classification.
    pub use_edge_text: bool,
    /// Inject the reflection supplement when it is significant.
    pub apply_reflection: bool,
    pub few_shot: &'a [FewShotExample],
    /// Last-resort classification label.
    pub fallback_label: Option<LabelId>,
    pub opts: MetricOptions,
}

impl<'a> PredictContext<'a> {
    pub fn new(store: &'a DyTagStore, card: &'a DatasetCard, mode: PromptMode) -> Self {
        PredictContext {
            store,
            card,
            knowledge: None,
            mode,
            use_edge_text: false,
            apply_reflection: true,
            few_shot: &[],
            fallback_label: None,
            opts: MetricOptions::default(),
        }
    }

    pub fn with_knowledge(mut self, k: &'a KnowledgeStore) -> Self {
        self.knowledge = Some(k);
        self
    }

    pub fn with_examples(mut self, examples: &'a [FewShotExample]) -> Self {
        self.few_shot = examples;
        self
    }

    pub fn with_edge_text(mut self, on: bool) -> Self {
        self.use_edge_text = on;
        self
    }

    pub fn with_reflection(mut self, on: bool) -> Self {
        self.apply_reflection = on;
        self
    }

    pub fn with_fallback_label(mut self, label: Option<LabelId>) -> Self {
        self.fallback_label = label;
        self
    }

    pub fn with_options(mut self, opts: MetricOptions) -> Self {
        self.opts = opts;
        self
    }

    fn gad(&self) -> Result<Option<&'a KnowledgeStore>, PredictError> {
        match self.mode {
            PromptMode::Gad => self.knowledge.map(Some).ok_or(PredictError::MissingKnowledge(self.mode)),
            _ => Ok(None),
        }
    }

    fn include_edge_text(&self, task: Task) -> bool {
        task == Task::Ec && self.use_edge_text
    }

    pub fn link_selection(&self) -> Result<LinkSelection, PredictError> {
        Ok(match self.gad()? {
            Some(k) => k.global_link.selection(),
            None if self.mode.is_text_only() => LinkSelection::TEXT_ONLY,
            None => LinkSelection::ALL,
        })
    }

    pub fn edge_selection(&self) -> Result<EdgeSelection, PredictError> {
        Ok(match self.gad()? {
            Some(k) => k.global_edge_label.selection(self.use_edge_text),
            None => EdgeSelection { node_text: true, eld: !self.mode.is_text_only(), edge_text: self.use_edge_text },
        })
    }
}

// ---------------------------------------------------------------------------
// rendering

fn pred(name: &str, vars: &Vars) -> Result<String, PromptError> {
    render_section(PREDICTOR, name, vars)
}

fn pair_vars(ev: &PairEvidence) -> Vars {
    Vars::new().set("src_id", ev.src).set("dst_id", ev.dst)
}

fn activity_vars(mut v: Vars, a: &NodeActivity) -> Vars {
    v.insert("freq", a.frequency);
    v.insert("as_src", a.times_as_source);
    v.insert("as_dst", a.times_as_destination);
    v.insert("avg_nf", format!("{:.2}", a.avg_neighbor_frequency));
    v
}

fn few_shot_note(ctx: &PredictContext<'_>) -> &'static str {
    if ctx.mode.is_few_shot() && !ctx.few_shot.is_empty() {
        " and the examples provided"
    } else {
        ""
    }
}

fn task_system(task: Task) -> Result<String, PromptError> {
    let name = match task {
        Task::Lp => "lp_task_system",
        Task::Nr => "nr_task_system",
        Task::Ec => "ec_task_system",
    };
    render_section(BLOCKS, name, &Vars::new())
}

fn task_input(task: Task, src: NodeId, dst: Option<NodeId>) -> Result<String, PromptError> {
    match task {
        Task::Lp => render_section(BLOCKS, "lp_task_input", &Vars::new().set("src_id", src).set("dst_id", dst.unwrap_or(src))),
        Task::Nr => render_section(BLOCKS, "nr_task_input", &Vars::new()),
        Task::Ec => render_section(BLOCKS, "ec_task_input", &Vars::new().set("src_id", src).set("dst_id", dst.unwrap_or(src))),
    }
}

fn gad_system(ctx: &PredictContext<'_>, k: &KnowledgeStore, task: Task) -> Result<String, PredictError> {
    let summary = match task {
        Task::Lp | Task::Nr => {
            let reflection = if ctx.apply_reflection { k.reflection_for(task) } else { None };
            link_summary_text(&k.global_link, ctx.link_selection()?, reflection)?
        }
        Task::Ec => edge_label_summary_text(&k.global_edge_label, ctx.edge_selection()?)?,
    };
    Ok(pred(
        "gad_system",
        &Vars::new()
            .set("global_description", ctx.card.global_description()?)
            .set("global_summary", summary)
            .set("task_system", task_system(task)?),
    )?)
}

/// System message for `task` under the context's mode.
pub fn system_message(ctx: &PredictContext<'_>, task: Task) -> Result<String, PredictError> {
    if let Some(k) = ctx.gad()? {
        return gad_system(ctx, k, task);
    }
    let intro = match task {
        Task::Lp => "link_intro",
        Task::Nr => "nr_intro",
        Task::Ec => "ec_intro",
    };
    let intro =
        pred(intro, &Vars::new().set("global_description", ctx.card.global_description()?).set("few_shot_note", few_shot_note(ctx)))?;
    let mut guides: Vec<String> = Vec::new();
    let mut n = 1;
    let mut guide = |name: &str, extra: Option<usize>| -> Result<(), PromptError> {
        let mut v = Vars::new().set("n", n);
        n += 1;
        if extra.is_some() {
            v.insert("m", n);
            n += 1;
        }
        guides.push(pred(name, &v)?);
        Ok(())
    };
    match task {
        Task::Lp | Task::Nr => {
            guide("guide_node_text", None)?;
            if !ctx.mode.is_text_only() {
                guide("guide_hi", None)?;
                guide("guide_cn", None)?;
                guide("guide_node_metrics", None)?;
            }
        }
        Task::Ec => {
            let sel = ctx.edge_selection()?;
            guide("guide_ec_node_text", None)?;
            if sel.eld {
                guide("guide_ec_preferences", Some(0))?;
            }
            if sel.edge_text {
                guide("guide_ec_edge_text", None)?;
            }
        }
    }
    Ok(format!("{}\n{}\n\n{}", intro, guides.join("\n"), task_system(task)?))
}

fn link_blocks(ev: &PairEvidence, sel: LinkSelection) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    if sel.text {
        out.push(pred("input_node_text", &Vars::new().set("src_text", &ev.src_text).set("dst_text", &ev.dst_text))?);
    }
    if sel.hi {
        out.push(pred("input_hi", &pair_vars(ev).set("hi", ev.hi))?);
    }
    if sel.cn {
        out.push(pred("input_cn", &pair_vars(ev).set("cn", ev.cn))?);
    }
    if sel.dnf {
        out.push(pred("input_node_metrics_header", &Vars::new())?);
        out.push(pred("input_src_metrics", &activity_vars(pair_vars(ev), &ev.src_activity))?);
        out.push(pred("input_dst_metrics", &activity_vars(pair_vars(ev), &ev.dst_activity))?);
    }
    Ok(out)
}

fn nr_source_block(ev: &PairEvidence, sel: LinkSelection) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    if sel.text {
        out.push(pred("input_nr_source", &pair_vars(ev).set("src_text", &ev.src_text))?);
    }
    if sel.dnf {
        out.push(pred("input_node_metrics_header", &Vars::new())?);
        out.push(pred("input_src_metrics", &activity_vars(pair_vars(ev), &ev.src_activity))?);
    }
    Ok(out)
}

fn nr_candidate_block(ev: &PairEvidence, sel: LinkSelection) -> Result<Vec<String>, PromptError> {
    let mut out = alloc::vec![pred("input_nr_candidate", &pair_vars(ev))?];
    if sel.text {
        out.push(pred("input_nr_candidate_text", &Vars::new().set("dst_text", &ev.dst_text))?);
    }
    if sel.hi {
        out.push(pred("input_hi", &pair_vars(ev).set("hi", ev.hi))?);
    }
    if sel.cn {
        out.push(pred("input_cn", &pair_vars(ev).set("cn", ev.cn))?);
    }
    if sel.dnf {
        out.push(pred("input_dst_metrics", &activity_vars(pair_vars(ev), &ev.dst_activity))?);
    }
    Ok(out)
}

/// A label histogram as a JSON object keyed by label text, most frequent first.
pub fn render_eld(store: &DyTagStore, eld: &EdgeLabelDistribution) -> String {
    let parts: Vec<String> = eld
        .ranked()
        .into_iter()
        .map(|(l, c)| format!("{}: {}", Value::String(store.label_text(l).unwrap_or_default().to_owned()), c))
        .collect();
    format!("{{{}}}", parts.join(", "))
}

fn class_names(store: &DyTagStore) -> String {
    Value::Array(store.labels().iter().map(|(_, t)| Value::String(t.clone())).collect()).to_string()
}

fn ec_blocks(store: &DyTagStore, ev: &PairEvidence, sel: EdgeSelection) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    if sel.node_text {
        out.push(pred("input_ec_node_text", &Vars::new().set("src_text", &ev.src_text).set("dst_text", &ev.dst_text))?);
    }
    if sel.eld {
        out.push(pred(
            "input_ec_preferences",
            &pair_vars(ev)
                .set("eld_src", render_eld(store, &ev.eld_src))
                .set("eld_dst", render_eld(store, &ev.eld_dst))
                .set("eld_pair", render_eld(store, &ev.eld_pair)),
        )?);
    }
    if sel.edge_text {
        out.push(pred("input_ec_edge_text", &Vars::new().set("edge_text", ev.edge_text.as_deref().unwrap_or("None")))?);
    }
    Ok(out)
}

/// The source node's local profile lines; fields judged not significant are left out.
fn local_summary(ctx: &PredictContext<'_>, task: Task, source: NodeId) -> Result<Option<String>, PredictError> {
    let Some(k) = ctx.gad()? else { return Ok(None) };
    let Some(p) = k.local_profiles.get(&source) else { return Ok(None) };
    let fields = [
        ("Node Description", &p.node_description, true),
        ("Neighbor Preference", &p.neighbor_preference, true),
        ("Edge Text Preference", &p.edge_text_preference, ctx.include_edge_text(task)),
        ("Edge Label Preference", &p.edge_label_preference, true),
        ("Structural Preference", &p.structural_preference, true),
    ];
    let mut lines: Vec<String> =
        fields.iter().filter(|(_, v, on)| *on && !is_not_significant(v)).map(|(n, v, _)| format!("- {}: {}", n, v.trim())).collect();
    if lines.is_empty() {
        return Ok(None);
    }
    if !is_not_significant(&p.explanation) {
        lines.push(format!("- Explanation: {}", p.explanation.trim()));
    }
    Ok(Some(pred("input_local_summary", &Vars::new().set("src_id", source).set("profile_lines", lines.join("\n")))?))
}

fn examples_block(ctx: &PredictContext<'_>) -> Result<Option<String>, PromptError> {
    if !ctx.mode.is_few_shot() || ctx.few_shot.is_empty() {
        return Ok(None);
    }
    let mut parts = alloc::vec![pred("examples_intro", &Vars::new())?];
    for (i, ex) in ctx.few_shot.iter().enumerate() {
        parts.push(format!(
            "{}\n{}\n{}",
            pred("example_header", &Vars::new().set("k", i + 1))?,
            ex.body,
            pred("example_answer", &Vars::new().set("answer", &ex.answer))?
        ));
    }
    Ok(Some(parts.join("\n\n")))
}

fn user_message(
    ctx: &PredictContext<'_>,
    task: Task,
    source: NodeId,
    destination: Option<NodeId>,
    blocks: Vec<String>,
) -> Result<String, PredictError> {
    let mut parts = Vec::new();
    if let Some(ex) = examples_block(ctx)? {
        parts.push(ex);
        parts.push(String::new());
    }
    parts.push(pred("sample_header", &Vars::new())?);
    parts.extend(blocks);
    if let Some(local) = local_summary(ctx, task, source)? {
        parts.push(local);
    }
    parts.push(String::new());
    parts.push(task_input(task, source, destination)?);
    Ok(parts.join("\n"))
}

fn check_task(q: &TaskQuery, task: Task) -> Result<(), PredictError> {
    if q.task == task {
        Ok(())
    } else {
        Err(PredictError::TaskMismatch { index: q.index, task })
    }
}

pub fn assemble_lp(ctx: &PredictContext<'_>, q: &TaskQuery, ev: &PairEvidence) -> Result<Vec<ChatMessage>, PredictError> {
    check_task(q, Task::Lp)?;
    let blocks = link_blocks(ev, ctx.link_selection()?)?;
    Ok(alloc::vec![
        ChatMessage::system(system_message(ctx, Task::Lp)?),
        ChatMessage::user(user_message(ctx, Task::Lp, ev.src, Some(ev.dst), blocks)?),
    ])
}

/// Retrieval prompt over the recalled, ranked candidates.
pub fn assemble_nr(ctx: &PredictContext<'_>, q: &TaskQuery, candidates: &[PairEvidence]) -> Result<Vec<ChatMessage>, PredictError> {
    check_task(q, Task::Nr)?;
    let sel = ctx.link_selection()?;
    let mut blocks = Vec::new();
    match candidates.first() {
        Some(first) => {
            blocks.extend(nr_source_block(first, sel)?);
            blocks.push(pred("input_nr_candidates_header", &Vars::new())?);
            for c in candidates {
                blocks.extend(nr_candidate_block(c, sel)?);
            }
        }
        None => blocks.push(pred("input_nr_empty", &Vars::new())?),
    }
    Ok(alloc::vec![
        ChatMessage::system(system_message(ctx, Task::Nr)?),
        ChatMessage::user(user_message(ctx, Task::Nr, q.source, None, blocks)?),
    ])
}

pub fn assemble_ec(ctx: &PredictContext<'_>, q: &TaskQuery, ev: &PairEvidence) -> Result<Vec<ChatMessage>, PredictError> {
    check_task(q, Task::Ec)?;
    let mut blocks = alloc::vec![pred("input_ec_classes", &Vars::new().set("edge_class_names", class_names(ctx.store)))?];
    blocks.extend(ec_blocks(ctx.store, ev, ctx.edge_selection()?)?);
    Ok(alloc::vec![
        ChatMessage::system(system_message(ctx, Task::Ec)?),
        ChatMessage::user(user_message(ctx, Task::Ec, ev.src, Some(ev.dst), blocks)?),
    ])
}

// ---------------------------------------------------------------------------
// answers

fn record(ctx: &PredictContext<'_>, q: &TaskQuery, answer: Answer, fallback_used: bool, digests: Vec<String>) -> PredictionRecord {
    PredictionRecord { query: q.clone(), mode: ctx.mode, answer, fallback_used, transcript_digests: digests }
}

pub fn link_fallback(ev: &PairEvidence) -> u8 {
    u8::from(ev.hi > 0 || ev.cn > 0)
}

fn binary_of(v: Value) -> Result<u8, String> {
    match v.as_u64() {
        Some(0) => Ok(0),
        Some(1) => Ok(1),
        _ => Err(format!("expected 0 or 1, got {}", v)),
    }
}

pub fn predict_link(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    q: &TaskQuery,
    ev: &PairEvidence,
) -> Result<PredictionRecord, PredictError> {
    let a = gateway.complete_typed(assemble_lp(ctx, q, ev)?, &Schema::Binary, binary_of)?;
    Ok(match a.outcome {
        Ok(b) => record(ctx, q, Answer::Link(b), false, a.digests),
        Err(e) => {
            log::warn!("link query {}: {}; using the structural fallback", q.index, e);
            record(ctx, q, Answer::Link(link_fallback(ev)), true, a.digests)
        }
    })
}

/// 1 + number of other candidates scoring at least as high as the positive.
pub fn pessimistic_rank(scores: &[(NodeId, f64)], positive: NodeId) -> Option<usize> {
    let p = scores.iter().find(|(n, _)| *n == positive)?.1;
    Some(1 + scores.iter().filter(|(n, s)| *n != positive && *s >= p).count())
}

pub fn retrieve_nodes(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    q: &TaskQuery,
    pool: Vec<PairEvidence>,
) -> Result<PredictionRecord, PredictError> {
    check_task(q, Task::Nr)?;
    let positive = match q.truth {
        Truth::Positive(p) => Some(p),
        _ => None,
    };
    let pool_size = q.pool.len().max(pool.len());
    let (set, keys) = match ctx.gad()? {
        Some(k) => (apply_thresholds(q.source, q.t, pool, k.thresholds_for(Task::Nr)), ranking_keys(&k.global_link)),
        None => (default_recall(q.source, q.t, pool), STRUCTURAL_KEYS.to_vec()),
    };
    let set = rank_candidates(set, &keys);
    let nodes = set.nodes();
    let unrecalled = pool_size + 1;
    if nodes.is_empty() {
        let answer = Answer::Retrieval { ranking: Vec::new(), positive_rank: unrecalled, pool_size };
        return Ok(record(ctx, q, answer, false, Vec::new()));
    }
    let a = gateway.complete_typed(assemble_nr(ctx, q, &set.candidates)?, &Schema::ProbabilityMap, |v| {
        let items = v.as_array().ok_or("expected a probability map")?;
        let mut map: BTreeMap<String, f64> = BTreeMap::new();
        for item in items {
            if let (Some(k), Some(p)) = (item.get(0).and_then(Value::as_str), item.get(1).and_then(Value::as_f64)) {
                map.entry(k.trim().to_owned()).or_insert(p);
            }
        }
        Ok(map)
    })?;
    Ok(match a.outcome {
        Ok(map) => {
            let mut scores: Vec<(NodeId, f64)> = nodes.iter().map(|n| (*n, map.get(&n.to_string()).copied().unwrap_or(0.0))).collect();
            scores.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(core::cmp::Ordering::Equal));
            let positive_rank = positive.and_then(|p| pessimistic_rank(&scores, p)).unwrap_or(unrecalled);
            let ranking = scores.into_iter().map(|(node, p)| RankedCandidate { node, likelihood: Some(p) }).collect();
            record(ctx, q, Answer::Retrieval { ranking, positive_rank, pool_size }, false, a.digests)
        }
        Err(e) => {
            log::warn!("retrieval query {}: {}; keeping the recall order", q.index, e);
            let positive_rank = positive.and_then(|p| set.position(p)).map(|i| i + 1).unwrap_or(unrecalled);
            let ranking = nodes.into_iter().map(|node| RankedCandidate { node, likelihood: None }).collect();
            record(ctx, q, Answer::Retrieval { ranking, positive_rank, pool_size }, true, a.digests)
        }
    })
}

/// Pair modal, then source modal, then the context's fallback, then the first class.
pub fn label_fallback(ctx: &PredictContext<'_>, ev: &PairEvidence) -> Result<LabelId, PredictError> {
    ev.eld_pair
        .modal()
        .or_else(|| ev.eld_src.modal())
        .or(ctx.fallback_label)
        .or_else(|| ctx.store.labels().first().map(|(l, _)| *l))
        .ok_or(PredictError::NoLabels)
}

pub fn classify_edge(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    q: &TaskQuery,
    ev: &PairEvidence,
) -> Result<PredictionRecord, PredictError> {
    let store = ctx.store;
    let a = gateway.complete_typed(assemble_ec(ctx, q, ev)?, &Schema::edge_class(), |v| {
        let text = v.get("Prediction").and_then(Value::as_str).ok_or("missing Prediction")?;
        store.label_by_text(text.trim()).ok_or_else(|| format!("'{}' is not one of the classes", text))
    })?;
    Ok(match a.outcome {
        Ok(l) => record(ctx, q, Answer::Label(l), false, a.digests),
        Err(e) => {
            log::warn!("classification query {}: {}; using the label fallback", q.index, e);
            record(ctx, q, Answer::Label(label_fallback(ctx, ev)?), true, a.digests)
        }
    })
}

/// Modal label over train+validation history; ties go to the label seen first.
pub fn global_modal_label(split: &SplitView<'_>) -> Option<LabelId> {
    let cutoff = split.history_cutoff();
    let mut counts: BTreeMap<LabelId, (u64, usize)> = BTreeMap::new();
    for (i, e) in split.store.edges()[..split.valid_end].iter().enumerate() {
        if e.ts < cutoff {
            counts.entry(e.label).or_insert((0, i)).0 += 1;
        }
    }
    counts.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).map(|(l, _)| l)
}

// ---------------------------------------------------------------------------
// queries and examples

pub const NR_NEGATIVES: usize = 100;
pub const FEW_SHOT_COUNT: usize = 6;

const LP_STREAM: u64 = 0x6c70;
const NR_STREAM: u64 = 0x6e72;
const FEW_SHOT_STREAM: u64 = 0x6673;
const TRAJECTORY_STREAM: u64 = 0x7472;

/// Evaluation queries grouped by batch.
///
/// LP yields a positive and a same-time negative per test edge, NR one pool
/// of the positive plus up to 100 sampled destinations, EC one query per edge.
pub fn build_queries(
    split: &SplitView<'_>,
    task: Task,
    sample_count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<TaskQuery>>, PredictError> {
    let store = split.store;
    let eligible = eligible_destinations(split);
    let mut lp_rng = SeededRng::derive(seed, LP_STREAM);
    let mut nr_rng = SeededRng::derive(seed, NR_STREAM);
    let mut index = 0;
    let mut out = Vec::new();
    for (b, range) in split.select_eval_window(sample_count, batch_size).into_iter().enumerate() {
        let mut batch = Vec::new();
        for i in range {
            let e = store.edge(i);
            let mut push = |destination: Option<NodeId>, pool: Vec<NodeId>, truth: Truth| {
                batch.push(TaskQuery { task, index, batch: b, source: e.src, destination, pool, t: e.ts, truth });
                index += 1;
            };
            match task {
                Task::Lp => {
                    push(Some(e.dst), Vec::new(), Truth::Link(1));
                    let neg = draw_negative(&mut lp_rng, &eligible, e.dst).ok_or(PredictError::NoNegative(e.src))?;
                    push(Some(neg), Vec::new(), Truth::Link(0));
                }
                Task::Nr => {
                    let others: Vec<NodeId> = eligible.iter().copied().filter(|n| *n != e.dst).collect();
                    let mut pool: Vec<NodeId> = nr_rng.sample_indices(others.len(), NR_NEGATIVES).into_iter().map(|j| others[j]).collect();
                    pool.push(e.dst);
                    pool.sort();
                    push(None, pool, Truth::Positive(e.dst));
                }
                Task::Ec => push(Some(e.dst), Vec::new(), Truth::Label(e.label)),
            }
        }
        out.push(batch);
    }
    Ok(out)
}

/// Validation edge indices for the examples: the first edge of evenly spaced batches.
pub fn few_shot_positions(split: &SplitView<'_>, batch_size: usize) -> Vec<usize> {
    let valid = split.valid();
    let n = valid.len();
    let batch = batch_size.max(1);
    let batches = n.div_ceil(batch);
    if batches >= FEW_SHOT_COUNT {
        (0..FEW_SHOT_COUNT).map(|i| valid.start + (i * batches / FEW_SHOT_COUNT) * batch).collect()
    } else if n >= FEW_SHOT_COUNT {
        (0..FEW_SHOT_COUNT).map(|i| valid.start + i * n / FEW_SHOT_COUNT).collect()
    } else {
        valid.collect()
    }
}

/// In-context examples for `task` rendered with the context's block selection.
///
/// LP and NR alternate positives with seeded same-time negatives.
pub fn build_few_shot(
    ctx: &PredictContext<'_>,
    split: &SplitView<'_>,
    task: Task,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<FewShotExample>, PredictError> {
    let store = split.store;
    let eligible = eligible_destinations(split);
    let mut rng = SeededRng::derive(seed, FEW_SHOT_STREAM);
    let mut out = Vec::new();
    for (k, i) in few_shot_positions(split, batch_size).into_iter().enumerate() {
        let e = store.edge(i);
        let positive = task == Task::Ec || k % 2 == 0;
        let dst = if positive {
            e.dst
        } else {
            match draw_negative(&mut rng, &eligible, e.dst) {
                Some(d) => d,
                None => continue,
            }
        };
        let ev = pair_evidence_with(store, e.src, dst, e.ts, ctx.include_edge_text(task), ctx.opts);
        let (blocks, answer) = match task {
            Task::Lp => (link_blocks(&ev, ctx.link_selection()?)?, String::from(if positive { "1" } else { "0" })),
            Task::Nr => {
                let sel = ctx.link_selection()?;
                let mut b = nr_source_block(&ev, sel)?;
                b.push(pred("input_nr_candidates_header", &Vars::new())?);
                b.extend(nr_candidate_block(&ev, sel)?);
                (b, format!("{{{}: {}}}", Value::String(dst.to_string()), if positive { "1.0" } else { "0.0" }))
            }
            Task::Ec => {
                let label = store.label_text(e.label).unwrap_or_default().to_owned();
                (ec_blocks(store, &ev, ctx.edge_selection()?)?, serde_json::json!({ "Prediction": label }).to_string())
            }
        };
        out.push(FewShotExample { body: blocks.join("\n"), answer });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// running

/// Evidence prepared for one query.
#[derive(Clone, Debug)]
pub enum Prepared {
    Pair(PairEvidence),
    Pool(Vec<PairEvidence>),
}

pub fn predict(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    q: &TaskQuery,
    prepared: Prepared,
) -> Result<PredictionRecord, PredictError> {
    match (q.task, prepared) {
        (Task::Lp, Prepared::Pair(ev)) => predict_link(ctx, gateway, q, &ev),
        (Task::Ec, Prepared::Pair(ev)) => classify_edge(ctx, gateway, q, &ev),
        (Task::Nr, Prepared::Pool(pool)) => retrieve_nodes(ctx, gateway, q, pool),
        (task, _) => Err(PredictError::TaskMismatch { index: q.index, task }),
    }
}

/// Evidence for one query through the direct route.
pub fn prepare_direct(ctx: &PredictContext<'_>, q: &TaskQuery) -> Prepared {
    let edge_text = ctx.include_edge_text(q.task);
    match q.task {
        Task::Nr => Prepared::Pool(q.pool.iter().map(|d| pair_evidence_with(ctx.store, q.source, *d, q.t, false, ctx.opts)).collect()),
        _ => {
            let p = q.pair();
            Prepared::Pair(pair_evidence_with(ctx.store, p.src, p.dst, p.t, edge_text, ctx.opts))
        }
    }
}

fn prepare_with(cursor: &mut EvidenceCursor<'_>, ctx: &PredictContext<'_>, q: &TaskQuery) -> Result<Prepared, MetricsError> {
    cursor.advance_to(q.t)?;
    Ok(match q.task {
        Task::Nr => Prepared::Pool(q.pool.iter().map(|d| cursor.evidence(q.source, *d, false)).collect()),
        _ => {
            let p = q.pair();
            Prepared::Pair(cursor.evidence(p.src, p.dst, ctx.include_edge_text(q.task)))
        }
    })
}

pub type Job<'j> = dyn Fn(usize) -> Result<PredictionRecord, PredictError> + Sync + 'j;

/// Runs the jobs of one batch; results come back in job order.
pub trait Executor: Sync {
    fn run(&self, n: usize, job: &Job<'_>) -> Vec<Result<PredictionRecord, PredictError>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn run(&self, n: usize, job: &Job<'_>) -> Vec<Result<PredictionRecord, PredictError>> {
        (0..n).map(job).collect()
    }
}

/// Resume and persistence hooks for per-batch checkpoints.
pub struct Checkpoints<'c> {
    pub load: &'c dyn Fn(usize) -> Option<Vec<PredictionRecord>>,
    pub save: &'c mut dyn FnMut(usize, &[PredictionRecord]) -> Result<(), String>,
}

/// Answers every batch in order, reusing checkpointed batches.
///
/// Evidence comes from one forward cursor over the whole run; the model calls
/// of a batch go through `executor`.
pub fn run_task(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    batches: &[Vec<TaskQuery>],
    executor: &dyn Executor,
    checkpoints: Option<Checkpoints<'_>>,
) -> Result<Vec<PredictionRecord>, PredictError> {
    let mut cursor = EvidenceCursor::new(ctx.store, ctx.opts);
    let mut checkpoints = checkpoints;
    let mut out = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        if let Some(done) = checkpoints.as_ref().and_then(|c| (c.load)(b)) {
            if done.len() == batch.len() {
                log::info!("batch {} restored from checkpoint", b);
                out.extend(done);
                continue;
            }
            log::warn!("batch {} checkpoint has {} of {} records; recomputing", b, done.len(), batch.len());
        }
        let prepared: Vec<Prepared> = batch.iter().map(|q| prepare_with(&mut cursor, ctx, q)).collect::<Result<_, _>>()?;
        let job = |i: usize| predict(ctx, gateway, &batch[i], prepared[i].clone());
        let results: Vec<PredictionRecord> = executor.run(batch.len(), &job).into_iter().collect::<Result<_, _>>()?;
        if let Some(c) = checkpoints.as_mut() {
            (c.save)(b, &results).map_err(PredictError::Checkpoint)?;
        }
        out.extend(results);
    }
    Ok(out)
}

/// Surrogate GAD link predictions, without reflection, on sampled validation negatives.
///
/// Returns the trajectories and the surrogate's accuracy on them.
pub fn collect_trajectories(
    ctx: &PredictContext<'_>,
    gateway: &Gateway<'_>,
    negatives: &[PairQuery],
    count: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, f64), PredictError> {
    let surrogate = PredictContext { mode: PromptMode::Gad, apply_reflection: false, few_shot: &[], ..*ctx };
    let mut picks = SeededRng::derive(seed, TRAJECTORY_STREAM).sample_indices(negatives.len(), count);
    picks.sort_unstable();
    let mut out = Vec::new();
    for (index, i) in picks.into_iter().enumerate() {
        let n = negatives[i];
        let q = TaskQuery {
            task: Task::Lp,
            index,
            batch: 0,
            source: n.src,
            destination: Some(n.dst),
            pool: Vec::new(),
            t: n.t,
            truth: Truth::Link(0),
        };
        let ev = pair_evidence_with(ctx.store, n.src, n.dst, n.t, false, ctx.opts);
        let r = predict_link(&surrogate, gateway, &q, &ev)?;
        let prediction = match r.answer {
            Answer::Link(b) => b,
            _ => 0,
        };
        out.push(Trajectory {
            src: n.src,
            dst: n.dst,
            t: n.t,
            hi: ev.hi,
            cn: ev.cn,
            dnf: ev.dnf(),
            prediction,
            correct: prediction == 0,
            digests: r.transcript_digests,
        });
    }
    let accuracy = if out.is_empty() { 1.0 } else { out.iter().filter(|t| t.correct).count() as f64 / out.len() as f64 };
    Ok((out, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::toy_store;
    use crate::knowledge::tests::sample_store;
    use crate::llm::{GenerationSettings, Matcher, MemoryTranscript, Responder, Rule, ScriptedBackend};
    use alloc::vec;

    fn t(v: u64) -> Timestamp {
        Timestamp::from_int(v)
    }

    fn lp(src: u64, dst: u64, at: u64, truth: u8) -> TaskQuery {
        TaskQuery {
            task: Task::Lp,
            index: 0,
            batch: 0,
            source: NodeId(src),
            destination: Some(NodeId(dst)),
            pool: vec![],
            t: t(at),
            truth: Truth::Link(truth),
        }
    }

    fn nr(src: u64, pool: &[u64], positive: u64, at: u64) -> TaskQuery {
        TaskQuery {
            task: Task::Nr,
            index: 0,
            batch: 0,
            source: NodeId(src),
            destination: None,
            pool: pool.iter().map(|n| NodeId(*n)).collect(),
            t: t(at),
            truth: Truth::Positive(NodeId(positive)),
        }
    }

    fn ec(src: u64, dst: u64, at: u64, label: u32) -> TaskQuery {
        TaskQuery {
            task: Task::Ec,
            index: 0,
            batch: 0,
            source: NodeId(src),
            destination: Some(NodeId(dst)),
            pool: vec![],
            t: t(at),
            truth: Truth::Label(LabelId(label)),
        }
    }

    fn fixed(reply: &str) -> ScriptedBackend {
        ScriptedBackend::new(vec![Rule::new(Matcher::Always, Responder::Fixed(reply.into()))], Default::default()).unwrap()
    }

    fn user_text(m: &[ChatMessage]) -> String {
        m.iter().map(|x| x.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn link_prompt_blocks_follow_mode() {
        let store = toy_store();
        let ks = sample_store();
        let q = lp(1, 2, 5, 1);
        let ev = match prepare_direct(&PredictContext::new(&store, &ks.dataset_card, PromptMode::Text), &q) {
            Prepared::Pair(ev) => ev,
            _ => unreachable!(),
        };
        let text = user_text(&assemble_lp(&PredictContext::new(&store, &ks.dataset_card, PromptMode::Text), &q, &ev).unwrap());
        assert!(text.contains("Source Node text: alice"));
        assert!(!text.contains("past interactions between Source ID"));
        let structure = user_text(&assemble_lp(&PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure), &q, &ev).unwrap());
        assert!(structure.contains("The total number of past interactions between Source ID 1 and Destination ID 2: 2"));
        assert!(structure.contains(" For Destination Node (2):"));
        assert!(structure.contains("Historical Interaction Count:\n- The total number"));

        let gad = PredictContext::new(&store, &ks.dataset_card, PromptMode::Gad);
        assert!(matches!(assemble_lp(&gad, &q, &ev), Err(PredictError::MissingKnowledge(PromptMode::Gad))));
        let gad = gad.with_knowledge(&ks);
        let text = user_text(&assemble_lp(&gad, &q, &ev).unwrap());
        assert!(text.contains("Source ID 1 and Destination ID 2: 2"));
        assert!(text.contains("shared neighbors"));
        assert!(!text.contains("Source Node text"));
        assert!(!text.contains("Node-Specific Metrics"));
        assert!(text.contains("Supplementary Knowledge: When a, then b."));
        let plain = user_text(&assemble_lp(&gad.with_reflection(false), &q, &ev).unwrap());
        assert!(!plain.contains("Supplementary Knowledge"));
    }

    #[test]
    fn local_profile_lines_skip_insignificant_fields() {
        let store = toy_store();
        let mut ks = sample_store();
        let profile = ks.local_profiles.remove(&NodeId(7)).unwrap();
        ks.local_profiles.insert(NodeId(1), profile);
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Gad).with_knowledge(&ks);
        let q = lp(1, 2, 5, 1);
        let ev = pair_evidence_with(&store, NodeId(1), NodeId(2), t(5), false, ctx.opts);
        let text = user_text(&assemble_lp(&ctx, &q, &ev).unwrap());
        assert!(text
            .contains(" Local Summary of Source Node (1):\n- Node Description: d\n- Neighbor Preference: n\n- Edge Label Preference: l"));
        assert!(!text.contains("Structural Preference"));
        assert!(!text.contains("Edge Text Preference"));
    }

    #[test]
    fn link_answers_and_fallback() {
        let store = toy_store();
        let ks = sample_store();
        let settings = GenerationSettings::default();
        let mock = ScriptedBackend::heuristic(None);
        let gw = Gateway::new(&mock, &settings);
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure);
        let q = lp(1, 2, 5, 1);
        let ev = pair_evidence_with(&store, NodeId(1), NodeId(2), t(5), false, ctx.opts);
        let r = predict_link(&ctx, &gw, &q, &ev).unwrap();
        assert_eq!(r.answer, Answer::Link(1));
        assert!(!r.fallback_used);
        assert_eq!(r.transcript_digests.len(), 1);
        let cold = pair_evidence_with(&store, NodeId(3), NodeId(1), t(2), false, ctx.opts);
        assert_eq!(predict_link(&ctx, &gw, &lp(3, 1, 2, 0), &cold).unwrap().answer, Answer::Link(0));

        let junk = fixed("perhaps");
        let gw = Gateway::new(&junk, &settings);
        let r = predict_link(&ctx, &gw, &q, &ev).unwrap();
        assert_eq!(r.answer, Answer::Link(1));
        assert!(r.fallback_used);
        assert_eq!(r.transcript_digests.len(), 2);
    }

    #[test]
    fn pessimistic_ranking() {
        let s = vec![(NodeId(1), 0.9), (NodeId(2), 0.5), (NodeId(3), 0.5), (NodeId(4), 0.1)];
        assert_eq!(pessimistic_rank(&s, NodeId(1)), Some(1));
        assert_eq!(pessimistic_rank(&s, NodeId(2)), Some(3));
        assert_eq!(pessimistic_rank(&s, NodeId(3)), Some(3));
        assert_eq!(pessimistic_rank(&s, NodeId(4)), Some(4));
        assert_eq!(pessimistic_rank(&s, NodeId(5)), None);
    }

    fn run_nr(backend: &ScriptedBackend, q: &TaskQuery) -> PredictionRecord {
        let store = toy_store();
        let ks = sample_store();
        let settings = GenerationSettings::default();
        let gw = Gateway::new(backend, &settings);
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure);
        let Prepared::Pool(pool) = prepare_direct(&ctx, q) else { unreachable!() };
        retrieve_nodes(&ctx, &gw, q, pool).unwrap()
    }

    fn rank_of(r: &PredictionRecord) -> usize {
        match &r.answer {
            Answer::Retrieval { positive_rank, .. } => *positive_rank,
            _ => unreachable!(),
        }
    }

    #[test]
    fn retrieval_ranks() {
        let q = nr(1, &[2, 3], 2, 5);
        let r = run_nr(&ScriptedBackend::heuristic(None), &q);
        assert_eq!(rank_of(&r), 1);
        assert!(!r.fallback_used);
        let r = run_nr(&fixed(r#"{"2": 0.5, "3": 0.5}"#), &q);
        assert_eq!(rank_of(&r), 2);
        let r = run_nr(&fixed(r#"{"3": 0.5}"#), &q);
        assert_eq!(rank_of(&r), 2);
        let r = run_nr(&fixed("no idea"), &q);
        assert!(r.fallback_used);
        assert_eq!(rank_of(&r), 1);
        match &r.answer {
            Answer::Retrieval { ranking, .. } => assert!(ranking.iter().all(|c| c.likelihood.is_none())),
            _ => unreachable!(),
        }
        // nothing recalled before any history: no call, rank past the pool
        let r = run_nr(&fixed("unused"), &nr(3, &[1, 2], 1, 1));
        assert_eq!(rank_of(&r), 3);
        assert!(r.transcript_digests.is_empty());
    }

    #[test]
    fn classification_and_fallback() {
        let store = toy_store();
        let ks = sample_store();
        let settings = GenerationSettings::default();
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure);
        let q = ec(1, 2, 5, 1);
        let ev = pair_evidence_with(&store, NodeId(1), NodeId(2), t(5), false, ctx.opts);
        let text = user_text(&assemble_ec(&ctx, &q, &ev).unwrap());
        assert!(text.contains(r#" Edge Classes : ["A","B"]."#));
        assert!(text.contains(r#"- Between Source Node (1) and Destination Node (2): {"A": 2}"#));
        assert!(!text.contains("party invitation"));

        let mock = ScriptedBackend::heuristic(None);
        let r = classify_edge(&ctx, &Gateway::new(&mock, &settings), &q, &ev).unwrap();
        assert_eq!(r.answer, Answer::Label(LabelId(0)));
        assert!(!r.fallback_used);
        let wrong = fixed(r#"{"Prediction": "Z"}"#);
        let r = classify_edge(&ctx, &Gateway::new(&wrong, &settings), &q, &ev).unwrap();
        assert_eq!(r.answer, Answer::Label(LabelId(0)));
        assert!(r.fallback_used);
        assert_eq!(r.transcript_digests.len(), 2);
    }

    #[test]
    fn edge_text_only_in_variant() {
        let store = toy_store();
        let ks = sample_store();
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure).with_edge_text(true);
        let q = ec(1, 2, 5, 1);
        let Prepared::Pair(ev) = prepare_direct(&ctx, &q) else { unreachable!() };
        let text = user_text(&assemble_ec(&ctx, &q, &ev).unwrap());
        assert!(text.contains(" Edge Text:\n- party invitation"));
        let Prepared::Pair(ev) = prepare_direct(&ctx.with_edge_text(false), &q) else { unreachable!() };
        assert_eq!(ev.edge_text, None);
    }

    #[test]
    fn global_modal_label_uses_history_only() {
        let store = toy_store();
        let split = SplitView { store: &store, train_end: 2, valid_end: 3 };
        assert_eq!(global_modal_label(&split), Some(LabelId(0)));
        let split = SplitView { store: &store, train_end: 0, valid_end: 0 };
        assert_eq!(global_modal_label(&split), None);
    }

    #[test]
    fn queries_are_seeded_and_well_formed() {
        let store = toy_store();
        let split = SplitView { store: &store, train_end: 2, valid_end: 3 };
        let a = build_queries(&split, Task::Lp, 10, 1, 7).unwrap();
        assert_eq!(a, build_queries(&split, Task::Lp, 10, 1, 7).unwrap());
        assert_eq!(a.len(), 2);
        for batch in &a {
            assert_eq!(batch.len(), 2);
            assert_eq!(batch[0].truth, Truth::Link(1));
            assert_eq!(batch[1].truth, Truth::Link(0));
            assert_eq!(batch[0].t, batch[1].t);
            assert_ne!(batch[0].destination, batch[1].destination);
        }
        let n = build_queries(&split, Task::Nr, 10, 5, 7).unwrap();
        assert_eq!(n.len(), 1);
        for q in &n[0] {
            let Truth::Positive(p) = q.truth else { panic!() };
            assert!(q.pool.contains(&p));
            assert!(q.pool.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(q.pool.len(), 3);
        }
        let e = build_queries(&split, Task::Ec, 10, 5, 7).unwrap();
        assert_eq!(e[0].iter().map(|q| q.truth).collect::<Vec<_>>(), vec![Truth::Label(LabelId(0)), Truth::Label(LabelId(1))]);
    }

    #[test]
    fn few_shot_spacing() {
        let store = toy_store();
        let split = SplitView { store: &store, train_end: 1, valid_end: 4 };
        assert_eq!(few_shot_positions(&split, 1), vec![1, 2, 3]);
        let ks = sample_store();
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::StructureFewShot);
        let ex = build_few_shot(&ctx, &split, Task::Lp, 1, 3).unwrap();
        assert_eq!(ex.iter().map(|e| e.answer.as_str()).collect::<Vec<_>>(), vec!["1", "0", "1"]);
        let ctx = ctx.with_examples(&ex);
        let q = lp(1, 2, 5, 1);
        let ev = pair_evidence_with(&store, NodeId(1), NodeId(2), t(5), false, ctx.opts);
        let m = assemble_lp(&ctx, &q, &ev).unwrap();
        assert!(m[0].content.contains("the examples provided"));
        assert!(m[1].content.starts_with(" Examples:\n\n Example 1:"));
        assert!(m[1].content.contains("Answer: 0"));
    }

    #[test]
    fn few_shot_spacing_over_many_batches() {
        use crate::graph::{StoreParts, TemporalEdge};
        let edges = (0..40u64)
            .map(|i| TemporalEdge { src: NodeId(i % 4), dst: NodeId(4 + i % 3), ts: t(i), label: LabelId(0), text_id: None })
            .collect();
        let parts = StoreParts {
            edges,
            node_texts: (0..7).map(|i| (NodeId(i), String::new())).collect(),
            edge_texts: vec![],
            labels: vec![(LabelId(0), "x".into())],
            bipartite: false,
        };
        let store = DyTagStore::from_parts(parts).unwrap();
        let split = SplitView { store: &store, train_end: 10, valid_end: 34 };
        // 24 validation edges in 12 batches of 2: batches 0, 2, 4, 6, 8, 10
        assert_eq!(few_shot_positions(&split, 2), vec![10, 14, 18, 22, 26, 30]);
        // 24 edges in 3 batches: evenly spaced edges instead
        assert_eq!(few_shot_positions(&split, 8), vec![10, 14, 18, 22, 26, 30]);
        assert_eq!(few_shot_positions(&split, 5).len(), 6);
    }

    /// Prompts depend on nothing but the query's inputs: swapping the hidden
    /// truth leaves every request byte-identical.
    #[test]
    fn prompts_are_truth_invariant() {
        let store = toy_store();
        let ks = sample_store();
        for mode in PromptMode::ALL {
            let ctx = PredictContext::new(&store, &ks.dataset_card, mode).with_knowledge(&ks).with_edge_text(true);
            let cases = [
                (lp(1, 2, 5, 1), Truth::Link(0)),
                (nr(1, &[2, 3], 2, 5), Truth::Positive(NodeId(3))),
                (ec(1, 2, 5, 1), Truth::Label(LabelId(0))),
            ];
            for (q, other) in cases {
                let render = |q: &TaskQuery| -> Vec<ChatMessage> {
                    match prepare_direct(&ctx, q) {
                        Prepared::Pair(ev) if q.task == Task::Lp => assemble_lp(&ctx, q, &ev).unwrap(),
                        Prepared::Pair(ev) => assemble_ec(&ctx, q, &ev).unwrap(),
                        Prepared::Pool(pool) => assemble_nr(&ctx, q, &pool).unwrap(),
                    }
                };
                let mut flipped = q.clone();
                flipped.truth = other;
                assert_eq!(render(&q), render(&flipped), "{mode} {}", q.task);
            }
        }
    }

    #[test]
    fn run_task_resumes_from_checkpoints() {
        use core::cell::RefCell;
        let store = toy_store();
        let split = SplitView { store: &store, train_end: 2, valid_end: 3 };
        let ks = sample_store();
        let settings = GenerationSettings::default();
        let mock = ScriptedBackend::heuristic(None);
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Structure);
        for task in Task::ALL {
            let batches = build_queries(&split, task, 10, 1, 1).unwrap();
            let sink = MemoryTranscript::default();
            let gw = Gateway::new(&mock, &settings).with_transcript(&sink);
            let saved: RefCell<BTreeMap<usize, Vec<PredictionRecord>>> = RefCell::new(BTreeMap::new());
            let load = |b: usize| saved.borrow().get(&b).cloned();
            let mut save = |b: usize, r: &[PredictionRecord]| {
                saved.borrow_mut().insert(b, r.to_vec());
                Ok(())
            };
            let full = run_task(&ctx, &gw, &batches, &Sequential, Some(Checkpoints { load: &load, save: &mut save })).unwrap();
            let calls = sink.records().len();
            assert!(calls > 0);
            // direct-route evidence gives the same answers
            let direct: Vec<PredictionRecord> =
                batches.iter().flatten().map(|q| predict(&ctx, &gw, q, prepare_direct(&ctx, q)).unwrap()).collect();
            assert_eq!(direct, full);
            let before = sink.records().len();
            saved.borrow_mut().remove(&1);
            let mut save = |b: usize, r: &[PredictionRecord]| {
                saved.borrow_mut().insert(b, r.to_vec());
                Ok(())
            };
            let resumed = run_task(&ctx, &gw, &batches, &Sequential, Some(Checkpoints { load: &load, save: &mut save })).unwrap();
            assert_eq!(resumed, full);
            assert_eq!(sink.records().len() - before, calls / 2, "{task}");
        }
    }

    #[test]
    fn trajectories_score_negatives() {
        let store = toy_store();
        let ks = sample_store();
        let settings = GenerationSettings::default();
        let mock = ScriptedBackend::heuristic(None);
        let gw = Gateway::new(&mock, &settings);
        let ctx = PredictContext::new(&store, &ks.dataset_card, PromptMode::Text).with_knowledge(&ks);
        let negatives = vec![PairQuery::new(NodeId(1), NodeId(3), t(5)), PairQuery::new(NodeId(3), NodeId(1), t(2))];
        let (traj, acc) = collect_trajectories(&ctx, &gw, &negatives, 5, 9).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[0].prediction, 1);
        assert!(!traj[0].correct);
        assert!(traj[1].correct);
        assert!((acc - 0.5).abs() < 1e-12);
    }
}
