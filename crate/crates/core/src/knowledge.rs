//! Knowledge types, the agents that produce them, and the persisted store.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::graph::{NodeId, SplitView, Timestamp};
use crate::llm::{ChatMessage, Field, Gateway, GatewayError, Kind, Schema};
use crate::metrics::{node_activity_with, node_label_distribution, EldScope, MetricOptions, NodeActivity, PairEvidence};
use crate::predict::Task;
use crate::prompt::{render_section, PromptError, Vars, AGENTS, BLOCKS, PREDICTOR};
use crate::stats::{truncate_chars, GlobalStats, StructMetric};

pub const FORMAT_VERSION: u32 = 1;
pub const NOT_SIGNIFICANT: &str = "Not Significant";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("dataset description is empty")]
    EmptyDescription,
    #[error("knowledge document: {0}")]
    Document(String),
}

/// Significance vocabulary of the generation agents, strongest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "Extremely Significant")]
    ExtremelySignificant,
    #[serde(rename = "Helpful")]
    Helpful,
    #[serde(rename = "Maybe Related")]
    MaybeRelated,
    #[serde(rename = "Not Relevant")]
    NotRelevant,
}

pub const LEVELS: &[&str] = &["Extremely Significant", "Helpful", "Maybe Related", "Not Relevant"];
pub const FLAGS: &[&str] = &["Significant", "Not Significant"];
const FAVORS: &[&str] = &["high", "low", "none"];

impl Level {
    pub fn as_str(self) -> &'static str {
        LEVELS[self as usize]
    }

    pub fn parse(s: &str) -> Option<Level> {
        let i = LEVELS.iter().position(|l| l.eq_ignore_ascii_case(s.trim()))?;
        Some([Level::ExtremelySignificant, Level::Helpful, Level::MaybeRelated, Level::NotRelevant][i])
    }

    pub fn is_strong(self) -> bool {
        matches!(self, Level::ExtremelySignificant | Level::Helpful)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which components a GAD prompt keeps: the strong ones, otherwise the
/// "Maybe Related" ones, never the irrelevant ones.
pub fn gad_selection(levels: &[Level]) -> Vec<bool> {
    let any_strong = levels.iter().any(|l| l.is_strong());
    levels.iter().map(|l| if any_strong { l.is_strong() } else { *l == Level::MaybeRelated }).collect()
}

/// Binary flag used by local profiles and reflection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    Significant,
    #[serde(rename = "Not Significant")]
    NotSignificant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCard {
    pub task_type: String,
    pub graph_type: String,
    pub node_type: String,
    pub node_text_type: String,
    pub edge_type: String,
    pub edge_text_type: String,
}

impl DatasetCard {
    pub fn global_description(&self) -> Result<String, PromptError> {
        render_section(
            BLOCKS,
            "global_description",
            &Vars::new()
                .set("graph_type", &self.graph_type)
                .set("node_type", &self.node_type)
                .set("node_text_type", &self.node_text_type)
                .set("edge_type", &self.edge_type)
                .set("edge_text_type", &self.edge_text_type),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Favors {
    High,
    Low,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricKnowledge {
    pub significance: Level,
    pub explanation: String,
    #[serde(default)]
    pub favors: Favors,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_indicator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_indicator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalLinkKnowledge {
    pub text: MetricKnowledge,
    pub hi: MetricKnowledge,
    pub cn: MetricKnowledge,
    pub dnf: MetricKnowledge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_positive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_negative: Option<String>,
    pub overall_rules: String,
}

impl GlobalLinkKnowledge {
    pub fn metric(&self, m: StructMetric) -> &MetricKnowledge {
        match m {
            StructMetric::Hi => &self.hi,
            StructMetric::Cn => &self.cn,
            StructMetric::Dnf => &self.dnf,
        }
    }

    /// GAD inclusion of (node text, HI, CN, DNF).
    pub fn selection(&self) -> LinkSelection {
        let s = gad_selection(&[self.text.significance, self.hi.significance, self.cn.significance, self.dnf.significance]);
        LinkSelection { text: s[0], hi: s[1], cn: s[2], dnf: s[3] }
    }
}

/// Which link-prediction prompt blocks are rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkSelection {
    pub text: bool,
    pub hi: bool,
    pub cn: bool,
    pub dnf: bool,
}

impl LinkSelection {
    pub const ALL: LinkSelection = LinkSelection { text: true, hi: true, cn: true, dnf: true };
    pub const TEXT_ONLY: LinkSelection = LinkSelection { text: true, hi: false, cn: false, dnf: false };
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub significance: Level,
    #[serde(default)]
    pub reason: String,
    pub guidance: String,
}

/// Edge-label knowledge. The edge-text guidance is only ever shown to the
/// edge-text EC variant; the standard EC task must not see edge text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalEdgeLabelKnowledge {
    pub node_text: Guidance,
    pub edge_text: Guidance,
    pub eld_guidance: Guidance,
}

impl GlobalEdgeLabelKnowledge {
    pub fn selection(&self, use_edge_text: bool) -> EdgeSelection {
        if use_edge_text {
            let s = gad_selection(&[self.node_text.significance, self.eld_guidance.significance, self.edge_text.significance]);
            EdgeSelection { node_text: s[0], eld: s[1], edge_text: s[2] }
        } else {
            let s = gad_selection(&[self.node_text.significance, self.eld_guidance.significance]);
            EdgeSelection { node_text: s[0], eld: s[1], edge_text: false }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeSelection {
    pub node_text: bool,
    pub eld: bool,
    pub edge_text: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl Comparator {
    pub fn parse(s: &str) -> Option<Comparator> {
        match s.trim() {
            "<" => Some(Comparator::Lt),
            "<=" | "≤" => Some(Comparator::Le),
            ">" => Some(Comparator::Gt),
            ">=" | "≥" => Some(Comparator::Ge),
            "=" | "==" => Some(Comparator::Eq),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Eq => "=",
        }
    }

    pub fn holds(self, x: f64, bound: f64) -> bool {
        match self {
            Comparator::Lt => x < bound,
            Comparator::Le => x <= bound,
            Comparator::Gt => x > bound,
            Comparator::Ge => x >= bound,
            Comparator::Eq => x == bound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub metric: StructMetric,
    pub op: Comparator,
    pub value: f64,
}

impl Clause {
    pub fn holds(&self, ev: &PairEvidence) -> bool {
        self.op.holds(self.metric.value(ev) as f64, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Combinator {
    And,
    Or,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleAction {
    #[default]
    #[serde(rename = "exclude-as-negative")]
    ExcludeAsNegative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub clauses: Vec<Clause>,
    pub combinator: Combinator,
    #[serde(default)]
    pub action: RuleAction,
}

impl ThresholdRule {
    pub fn new(clauses: Vec<Clause>, combinator: Combinator) -> Result<Self, String> {
        let rule = ThresholdRule { clauses, combinator, action: RuleAction::ExcludeAsNegative };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.clauses.is_empty() {
            return Err("threshold rule has no clauses".into());
        }
        if let Some(c) = self.clauses.iter().find(|c| !c.value.is_finite()) {
            return Err(format!("threshold bound for {} is not finite", c.metric));
        }
        Ok(())
    }

    pub fn matches(&self, ev: &PairEvidence) -> bool {
        match self.combinator {
            Combinator::And => self.clauses.iter().all(|c| c.holds(ev)),
            Combinator::Or => self.clauses.iter().any(|c| c.holds(ev)),
        }
    }

    /// `HI < 1 AND CN < 1`.
    pub fn describe(&self) -> String {
        let joiner = match self.combinator {
            Combinator::And => " AND ",
            Combinator::Or => " OR ",
        };
        let parts: Vec<String> = self.clauses.iter().map(|c| format!("{} {} {}", c.metric, c.op.symbol(), c.value)).collect();
        parts.join(joiner)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_description: String,
    pub neighbor_preference: String,
    pub edge_text_preference: String,
    pub edge_label_preference: String,
    pub structural_preference: String,
    pub explanation: String,
}

pub fn is_not_significant(s: &str) -> bool {
    let t = s.trim().trim_end_matches('.');
    t.is_empty() || t.eq_ignore_ascii_case(NOT_SIGNIFICANT)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub significance: Flag,
    #[serde(default)]
    pub supplementation: String,
}

impl ReflectionOutcome {
    pub fn not_significant() -> Self {
        ReflectionOutcome { significance: Flag::NotSignificant, supplementation: String::new() }
    }

    pub fn is_significant(&self) -> bool {
        self.significance == Flag::Significant
    }
}

/// Global, local and reflection knowledge for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeStore {
    pub format_version: u32,
    pub dataset_card: DatasetCard,
    pub global_link: GlobalLinkKnowledge,
    pub global_edge_label: GlobalEdgeLabelKnowledge,
    pub thresholds: BTreeMap<Task, Vec<ThresholdRule>>,
    pub local_profiles: BTreeMap<NodeId, NodeProfile>,
    pub reflection: BTreeMap<Task, ReflectionOutcome>,
    /// Knowledge field path to the digests of the calls that produced it.
    pub provenance: BTreeMap<String, Vec<String>>,
}

impl KnowledgeStore {
    pub fn thresholds_for(&self, task: Task) -> &[ThresholdRule] {
        self.thresholds.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn reflection_for(&self, task: Task) -> Option<&ReflectionOutcome> {
        self.reflection.get(&task)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).unwrap_or_default();
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, KnowledgeError> {
        let store: KnowledgeStore = serde_json::from_str(text).map_err(|e| KnowledgeError::Document(e.to_string()))?;
        store.validate().map_err(KnowledgeError::Document)?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!("unsupported format_version {}", self.format_version));
        }
        for (task, rules) in &self.thresholds {
            for r in rules {
                r.validate().map_err(|e| format!("thresholds.{}: {}", task, e))?;
            }
        }
        for (task, r) in &self.reflection {
            if r.is_significant() == r.supplementation.trim().is_empty() {
                return Err(format!("reflection.{}: supplementation must be present iff significant", task));
            }
        }
        for (node, p) in &self.local_profiles {
            if p.node_description.trim().is_empty() {
                return Err(format!("local_profiles.{}: empty node description", node));
            }
        }
        Ok(())
    }

    pub fn add_provenance(&mut self, path: impl Into<String>, digests: &[String]) {
        let entry = self.provenance.entry(path.into()).or_default();
        for d in digests {
            if !entry.contains(d) {
                entry.push(d.clone());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Output schemas

const INITIAL_FIELDS: &[Field] = &[
    Field::optional("thought", Kind::String),
    Field::optional("speak", Kind::String),
    Field::required("task_type", Kind::String),
    Field::required("graph_type", Kind::String),
    Field::required("node_type", Kind::String),
    Field::required("node_text_type", Kind::String),
    Field::required("edge_type", Kind::String),
    Field::required("edge_text_type", Kind::String),
];

const METRIC_FIELDS: &[Field] = &[
    Field::required("Significance", Kind::OneOf(LEVELS)),
    Field::required("Explanation", Kind::String),
    Field::required("Favors", Kind::OneOf(FAVORS)),
    Field::optional("Positive Indicator", Kind::String),
    Field::optional("Negative Indicator", Kind::String),
];

const OVERALL_FIELDS: &[Field] =
    &[Field::optional("Positive Indicator", Kind::String), Field::optional("Negative Indicator", Kind::String)];

const STRUCTURE_FIELDS: &[Field] = &[
    Field::required("Historical Interaction", Kind::Object(METRIC_FIELDS)),
    Field::required("Common Neighbors", Kind::Object(METRIC_FIELDS)),
    Field::required("Destination Node Frequency", Kind::Object(METRIC_FIELDS)),
    Field::optional("Overall Structural Indicators", Kind::Object(OVERALL_FIELDS)),
    Field::required("Structure Rules and Report", Kind::String),
    Field::optional("Negative Threshold", Kind::Any),
];

const GUIDE_FIELDS: &[Field] = &[
    Field::required("Significance", Kind::OneOf(LEVELS)),
    Field::optional("Reason", Kind::String),
    Field::required("Explanation", Kind::String),
];

const EDGE_TEXT_FIELDS: &[Field] =
    &[Field::required("Node Text", Kind::Object(GUIDE_FIELDS)), Field::required("Edge Text", Kind::Object(GUIDE_FIELDS))];

const LOCAL_TEXT_FIELDS: &[Field] = &[
    Field::required("Node Description", Kind::String),
    Field::required("Neighbor Preference", Kind::String),
    Field::required("Edge Text Preference", Kind::String),
    Field::required("Edge Label Preference", Kind::String),
    Field::required("Explanation", Kind::String),
];

const LOCAL_STRUCT_FIELDS: &[Field] = &[Field::required("Structural Preference", Kind::String)];

const REFLECTION_FIELDS: &[Field] =
    &[Field::required("Significance", Kind::OneOf(FLAGS)), Field::optional("Supplementation", Kind::String)];

fn text_at(v: &Value, key: &str) -> String {
    v.get(key).and_then(Value::as_str).unwrap_or_default().trim().to_owned()
}

fn opt_text(v: &Value, key: &str) -> Option<String> {
    let s = text_at(v, key);
    if s.is_empty() {
        None
    } else {
        Some(s)
    }
}

fn level_at(v: &Value, key: &str) -> Result<Level, String> {
    Level::parse(&text_at(v, key)).ok_or_else(|| format!("'{}' is not a significance level", key))
}

fn guidance_from(v: &Value) -> Result<Guidance, String> {
    Ok(Guidance { significance: level_at(v, "Significance")?, reason: text_at(v, "Reason"), guidance: text_at(v, "Explanation") })
}

fn metric_from(v: &Value) -> Result<MetricKnowledge, String> {
    let favors = match text_at(v, "Favors").as_str() {
        "high" => Favors::High,
        "low" => Favors::Low,
        _ => Favors::None,
    };
    Ok(MetricKnowledge {
        significance: level_at(v, "Significance")?,
        explanation: text_at(v, "Explanation"),
        favors,
        positive_indicator: opt_text(v, "Positive Indicator"),
        negative_indicator: opt_text(v, "Negative Indicator"),
    })
}

/// Compiles the machine-readable negative indicator; absent or empty means no rule.
pub fn threshold_from(v: Option<&Value>) -> Result<Option<ThresholdRule>, String> {
    let Some(v) = v else { return Ok(None) };
    if v.is_null() {
        return Ok(None);
    }
    let obj = v.as_object().ok_or("'Negative Threshold' must be an object")?;
    let combinator = match obj.get("combinator").and_then(Value::as_str).map(|s| s.trim().to_ascii_uppercase()) {
        None => Combinator::And,
        Some(s) if s == "AND" => Combinator::And,
        Some(s) if s == "OR" => Combinator::Or,
        Some(s) => return Err(format!("unknown combinator '{}'", s)),
    };
    let clauses = match obj.get("clauses") {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::Array(a)) => a,
        Some(_) => return Err("'clauses' must be a list".into()),
    };
    if clauses.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(clauses.len());
    for c in clauses {
        let metric =
            c.get("metric").and_then(Value::as_str).and_then(StructMetric::parse).ok_or("clause metric must be one of HI, CN, DNF")?;
        let op = c.get("op").and_then(Value::as_str).and_then(Comparator::parse).ok_or("clause op must be <, <=, >, >= or =")?;
        let value = c
            .get("value")
            .and_then(|x| x.as_f64().or_else(|| x.as_str().and_then(|s| s.trim().parse().ok())))
            .filter(|x: &f64| x.is_finite())
            .ok_or("clause value must be a finite number")?;
        out.push(Clause { metric, op, value });
    }
    ThresholdRule::new(out, combinator).map(Some)
}

// ---------------------------------------------------------------------------
// Initial agent

pub const TASK_NAMES: &str = "future link prediction, node retrieval and future edge classification";

pub fn initial_messages(description: &str, task_name: &str) -> Result<Vec<ChatMessage>, PromptError> {
    Ok(alloc::vec![
        ChatMessage::system(render_section(AGENTS, "initial_system", &Vars::new())?),
        ChatMessage::user(render_section(
            AGENTS,
            "initial_input",
            &Vars::new().set("task_name", task_name).set("description", description.trim()),
        )?),
    ])
}

fn card_from(v: Value) -> Result<DatasetCard, String> {
    let card = DatasetCard {
        task_type: text_at(&v, "task_type"),
        graph_type: text_at(&v, "graph_type"),
        node_type: text_at(&v, "node_type"),
        node_text_type: text_at(&v, "node_text_type"),
        edge_type: text_at(&v, "edge_type"),
        edge_text_type: text_at(&v, "edge_text_type"),
    };
    let fields = [
        ("task_type", &card.task_type),
        ("graph_type", &card.graph_type),
        ("node_type", &card.node_type),
        ("node_text_type", &card.node_text_type),
        ("edge_type", &card.edge_type),
        ("edge_text_type", &card.edge_text_type),
    ];
    if let Some((k, _)) = fields.iter().find(|(_, v)| v.is_empty()) {
        return Err(format!("dataset card field '{}' is empty", k));
    }
    Ok(card)
}

/// Turns a human-written description into a dataset card; failure is fatal.
pub fn run_initial_agent(description: &str, gateway: &Gateway<'_>) -> Result<(DatasetCard, Vec<String>), KnowledgeError> {
    if description.trim().is_empty() {
        return Err(KnowledgeError::EmptyDescription);
    }
    let a = gateway.complete_typed(initial_messages(description, TASK_NAMES)?, &Schema::Object(INITIAL_FIELDS), card_from)?;
    Ok((a.outcome?, a.digests))
}

// ---------------------------------------------------------------------------
// Global summary agents

fn definitions() -> Result<String, PromptError> {
    render_section(AGENTS, "significance_definitions", &Vars::new())
}

pub fn structure_messages(card: &DatasetCard, stats: &GlobalStats) -> Result<Vec<ChatMessage>, PromptError> {
    let d = |m| stats.distribution(m);
    let vars = Vars::new()
        .set("pos_hi", d(StructMetric::Hi).0.render())
        .set("pos_cn", d(StructMetric::Cn).0.render())
        .set("pos_dnf", d(StructMetric::Dnf).0.render())
        .set("neg_hi", d(StructMetric::Hi).1.render())
        .set("neg_cn", d(StructMetric::Cn).1.render())
        .set("neg_dnf", d(StructMetric::Dnf).1.render());
    Ok(alloc::vec![
        ChatMessage::system(render_section(
            AGENTS,
            "structure_system",
            &Vars::new().set("global_description", card.global_description()?)
        )?),
        ChatMessage::user(render_section(AGENTS, "structure_input", &vars)?),
    ])
}

fn render_link_texts(stats: &GlobalStats) -> String {
    let mut out = String::from("Positive pairs (source text | destination text):\n");
    for (s, d) in &stats.link_texts.positive {
        out.push_str(&format!("- ('{}', '{}')\n", s, d));
    }
    out.push_str("\nNegative pairs (source text | destination text):\n");
    for (s, d) in &stats.link_texts.negative {
        out.push_str(&format!("- ('{}', '{}')\n", s, d));
    }
    out.trim_end().to_owned()
}

pub fn text_link_messages(card: &DatasetCard, stats: &GlobalStats) -> Result<Vec<ChatMessage>, PromptError> {
    Ok(alloc::vec![
        ChatMessage::system(render_section(
            AGENTS,
            "text_link_system",
            &Vars::new().set("global_description", card.global_description()?).set("definitions", definitions()?)
        )?),
        ChatMessage::user(render_section(AGENTS, "text_link_input", &Vars::new().set("text_samples", render_link_texts(stats)))?),
    ])
}

fn render_edge_samples(stats: &GlobalStats) -> String {
    let mut out = String::from("Text samples (source node | destination node | edge text | edge label):\n");
    for s in &stats.text_samples.samples {
        out.push_str(&format!("- '{}' | '{}' | '{}' | '{}'\n", s.src_text, s.dst_text, s.edge_text, s.label_text));
    }
    out.trim_end().to_owned()
}

pub fn edge_text_messages(card: &DatasetCard, stats: &GlobalStats) -> Result<Vec<ChatMessage>, PromptError> {
    Ok(alloc::vec![
        ChatMessage::system(render_section(
            AGENTS,
            "edge_text_system",
            &Vars::new().set("global_description", card.global_description()?).set("definitions", definitions()?)
        )?),
        ChatMessage::user(render_section(AGENTS, "edge_text_input", &Vars::new().set("text_samples", render_edge_samples(stats)))?),
    ])
}

pub fn eld_messages(card: &DatasetCard, stats: &GlobalStats) -> Result<Vec<ChatMessage>, PromptError> {
    let vars = Vars::new()
        .set("pref_src", stats.preference(EldScope::Source).render())
        .set("pref_dst", stats.preference(EldScope::Destination).render())
        .set("pref_pair", stats.preference(EldScope::Pair).render());
    Ok(alloc::vec![
        ChatMessage::system(render_section(AGENTS, "eld_system", &Vars::new().set("global_description", card.global_description()?))?),
        ChatMessage::user(render_section(AGENTS, "eld_input", &vars)?),
    ])
}

/// Output of the structural and text-link agents.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkSummary {
    pub knowledge: GlobalLinkKnowledge,
    pub thresholds: Vec<ThresholdRule>,
    pub structure_digests: Vec<String>,
    pub text_digests: Vec<String>,
}

fn structure_from(v: Value) -> Result<(GlobalLinkKnowledge, Option<ThresholdRule>), String> {
    let overall = v.get("Overall Structural Indicators").cloned().unwrap_or(Value::Null);
    let placeholder = MetricKnowledge {
        significance: Level::NotRelevant,
        explanation: String::new(),
        favors: Favors::None,
        positive_indicator: None,
        negative_indicator: None,
    };
    let k = GlobalLinkKnowledge {
        text: placeholder,
        hi: metric_from(&v["Historical Interaction"])?,
        cn: metric_from(&v["Common Neighbors"])?,
        dnf: metric_from(&v["Destination Node Frequency"])?,
        overall_positive: opt_text(&overall, "Positive Indicator"),
        overall_negative: opt_text(&overall, "Negative Indicator"),
        overall_rules: text_at(&v, "Structure Rules and Report"),
    };
    Ok((k, threshold_from(v.get("Negative Threshold"))?))
}

/// Structural agent then text-link agent; either failing after its re-ask is fatal.
pub fn run_global_link_summary(card: &DatasetCard, stats: &GlobalStats, gateway: &Gateway<'_>) -> Result<LinkSummary, KnowledgeError> {
    let s = gateway.complete_typed(structure_messages(card, stats)?, &Schema::Object(STRUCTURE_FIELDS), structure_from)?;
    let (mut knowledge, rule) = s.outcome?;
    let t = gateway.complete_typed(text_link_messages(card, stats)?, &Schema::Object(GUIDE_FIELDS), |v| {
        Ok(MetricKnowledge {
            significance: level_at(&v, "Significance")?,
            explanation: {
                let reason = text_at(&v, "Reason");
                let expl = text_at(&v, "Explanation");
                if reason.is_empty() {
                    expl
                } else {
                    format!("{} {}", reason, expl).trim().to_owned()
                }
            },
            favors: Favors::None,
            positive_indicator: None,
            negative_indicator: None,
        })
    })?;
    knowledge.text = t.outcome?;
    Ok(LinkSummary { knowledge, thresholds: rule.into_iter().collect(), structure_digests: s.digests, text_digests: t.digests })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLabelSummary {
    pub knowledge: GlobalEdgeLabelKnowledge,
    pub edge_text_digests: Vec<String>,
    pub eld_digests: Vec<String>,
}

pub fn run_global_edge_label_summary(
    card: &DatasetCard,
    stats: &GlobalStats,
    gateway: &Gateway<'_>,
) -> Result<EdgeLabelSummary, KnowledgeError> {
    let e = gateway.complete_typed(edge_text_messages(card, stats)?, &Schema::Object(EDGE_TEXT_FIELDS), |v| {
        Ok((guidance_from(&v["Node Text"])?, guidance_from(&v["Edge Text"])?))
    })?;
    let (node_text, edge_text) = e.outcome?;
    let l = gateway.complete_typed(eld_messages(card, stats)?, &Schema::Object(GUIDE_FIELDS), |v| guidance_from(&v))?;
    let eld_guidance = l.outcome?;
    Ok(EdgeLabelSummary {
        knowledge: GlobalEdgeLabelKnowledge { node_text, edge_text, eld_guidance },
        edge_text_digests: e.digests,
        eld_digests: l.digests,
    })
}

// ---------------------------------------------------------------------------
// Summary text shown to predictors and the reflection agent

fn summary_metric(name: &str, k: &MetricKnowledge, with_indicators: bool) -> Result<String, PromptError> {
    let mut s = render_section(
        PREDICTOR,
        "summary_metric",
        &Vars::new().set("name", name).set("significance", k.significance).set("explanation", &k.explanation),
    )?;
    if with_indicators && (k.positive_indicator.is_some() || k.negative_indicator.is_some()) {
        s.push('\n');
        s.push_str(&render_section(
            PREDICTOR,
            "summary_indicators",
            &Vars::new()
                .set("positive", k.positive_indicator.as_deref().unwrap_or("none"))
                .set("negative", k.negative_indicator.as_deref().unwrap_or("none")),
        )?);
    }
    Ok(s)
}

/// Global link knowledge restricted to `sel`, plus the reflection sentence when given.
pub fn link_summary_text(
    k: &GlobalLinkKnowledge,
    sel: LinkSelection,
    reflection: Option<&ReflectionOutcome>,
) -> Result<String, PromptError> {
    let mut lines = alloc::vec![render_section(PREDICTOR, "summary_header", &Vars::new())?];
    if sel.text {
        lines.push(summary_metric("Node Text", &k.text, false)?);
    }
    if sel.hi {
        lines.push(summary_metric("Historical Interaction", &k.hi, true)?);
    }
    if sel.cn {
        lines.push(summary_metric("Common Neighbors", &k.cn, true)?);
    }
    if sel.dnf {
        lines.push(summary_metric("Destination Node Frequency", &k.dnf, true)?);
    }
    if sel.hi || sel.cn || sel.dnf {
        if !k.overall_rules.is_empty() {
            lines.push(render_section(PREDICTOR, "summary_overall", &Vars::new().set("rules", &k.overall_rules))?);
        }
    }
    if let Some(r) = reflection.filter(|r| r.is_significant()) {
        lines.push(render_section(PREDICTOR, "summary_reflection", &Vars::new().set("supplementation", &r.supplementation))?);
    }
    Ok(lines.join("\n"))
}

pub fn edge_label_summary_text(k: &GlobalEdgeLabelKnowledge, sel: EdgeSelection) -> Result<String, PromptError> {
    let mut lines = alloc::vec![render_section(PREDICTOR, "summary_header", &Vars::new())?];
    let g = |name: &str, g: &Guidance| -> Result<String, PromptError> {
        render_section(
            PREDICTOR,
            "summary_metric",
            &Vars::new().set("name", name).set("significance", g.significance).set("explanation", &g.guidance),
        )
    };
    if sel.node_text {
        lines.push(g("Node Text", &k.node_text)?);
    }
    if sel.eld {
        lines.push(g("Edge Label Preferences", &k.eld_guidance)?);
    }
    if sel.edge_text {
        lines.push(g("Edge Text", &k.edge_text)?);
    }
    Ok(lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Local summary

/// Nodes ranked by train+validation frequency (descending, then id); the top
/// `ceil(fraction * active)` are returned.
pub fn select_active_nodes(split: &SplitView<'_>, fraction: f64) -> Vec<NodeId> {
    let mut freq: BTreeMap<NodeId, u64> = BTreeMap::new();
    for i in 0..split.valid_end {
        let e = split.store.edge(i);
        *freq.entry(e.src).or_insert(0) += 1;
        *freq.entry(e.dst).or_insert(0) += 1;
    }
    let mut ranked: Vec<(NodeId, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = ceil_fraction(fraction, ranked.len());
    ranked.into_iter().take(take).map(|(n, _)| n).collect()
}

/// `ceil(fraction * n)` with a small tolerance so 0.1 * 30 selects 3, not 4.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let f = if fraction.is_nan() { 0.0 } else { fraction.clamp(0.0, 1.0) };
    let x = f * n as f64;
    let k = x as usize;
    if x - k as f64 > 1e-9 {
        (k + 1).min(n)
    } else {
        k.min(n)
    }
}

/// What a local summary agent sees about one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEvidence {
    pub node: NodeId,
    pub node_text: String,
    pub interactions: Vec<String>,
    pub label_distribution: String,
    pub activity: NodeActivity,
    pub distinct_neighbors: usize,
}

/// Up to `cap` most recent interactions strictly before the history cutoff.
pub fn build_local_evidence(split: &SplitView<'_>, node: NodeId, cap: usize, truncation: usize, opts: MetricOptions) -> LocalEvidence {
    let store = split.store;
    let cutoff: Timestamp = split.history_cutoff();
    let mut idx: Vec<u32> = store
        .incidence(node, true)
        .iter()
        .chain(store.incidence(node, false))
        .copied()
        .filter(|&e| store.edge(e as usize).ts < cutoff)
        .collect();
    idx.sort_unstable();
    idx.dedup();
    let start = idx.len().saturating_sub(cap);
    let interactions = idx[start..]
        .iter()
        .map(|&e| {
            let edge = store.edge(e as usize);
            let (role, other) = if edge.src == node { ("to", edge.dst) } else { ("from", edge.src) };
            format!(
                "- t={} {} node {} ('{}'): edge text '{}', label '{}'",
                edge.ts,
                role,
                other,
                truncate_chars(store.node_text(other).unwrap_or_default(), truncation),
                truncate_chars(store.edge_text_of(e as usize).unwrap_or_default(), truncation),
                store.label_text(edge.label).unwrap_or_default()
            )
        })
        .collect();
    let eld = node_label_distribution(store, node, EldScope::Source, cutoff);
    let total = eld.total();
    let parts: Vec<String> = eld
        .ranked()
        .iter()
        .map(|(l, c)| format!("\"{}\": \"{:.2}%\"", store.label_text(*l).unwrap_or_default(), *c as f64 * 100.0 / total as f64))
        .collect();
    LocalEvidence {
        node,
        node_text: truncate_chars(store.node_text(node).unwrap_or_default(), truncation),
        interactions,
        label_distribution: format!("{{{}}}", parts.join(", ")),
        activity: node_activity_with(store, node, cutoff, opts),
        distinct_neighbors: store.neighbors_before_with(node, cutoff, opts.direction).len(),
    }
}

pub fn local_text_messages(card: &DatasetCard, ev: &LocalEvidence) -> Result<Vec<ChatMessage>, PromptError> {
    let samples = if ev.interactions.is_empty() { String::from("- none") } else { ev.interactions.join("\n") };
    Ok(alloc::vec![
        ChatMessage::system(render_section(
            AGENTS,
            "local_text_system",
            &Vars::new().set("global_description", card.global_description()?)
        )?),
        ChatMessage::user(render_section(
            AGENTS,
            "local_text_input",
            &Vars::new()
                .set("node_id", ev.node)
                .set("node_text", &ev.node_text)
                .set("text_samples", samples)
                .set("label_distribution", &ev.label_distribution),
        )?),
    ])
}

pub fn local_struct_messages(card: &DatasetCard, ev: &LocalEvidence) -> Result<Vec<ChatMessage>, PromptError> {
    Ok(alloc::vec![
        ChatMessage::system(render_section(
            AGENTS,
            "local_struct_system",
            &Vars::new().set("global_description", card.global_description()?)
        )?),
        ChatMessage::user(render_section(
            AGENTS,
            "local_struct_input",
            &Vars::new()
                .set("node_id", ev.node)
                .set("freq", ev.activity.frequency)
                .set("as_src", ev.activity.times_as_source)
                .set("as_dst", ev.activity.times_as_destination)
                .set("avg_nf", format!("{:.2}", ev.activity.avg_neighbor_frequency))
                .set("distinct_neighbors", ev.distinct_neighbors),
        )?),
    ])
}

/// Text profile plus structural preference. `Ok(None)` when either reply
/// stays malformed after its re-ask; the node then simply has no profile.
pub fn run_local_summary(
    card: &DatasetCard,
    ev: &LocalEvidence,
    gateway: &Gateway<'_>,
) -> Result<Option<(NodeProfile, Vec<String>)>, KnowledgeError> {
    let t = gateway.complete_typed(local_text_messages(card, ev)?, &Schema::Object(LOCAL_TEXT_FIELDS), |v| {
        let p = NodeProfile {
            node_description: text_at(&v, "Node Description"),
            neighbor_preference: text_at(&v, "Neighbor Preference"),
            edge_text_preference: text_at(&v, "Edge Text Preference"),
            edge_label_preference: text_at(&v, "Edge Label Preference"),
            structural_preference: String::new(),
            explanation: text_at(&v, "Explanation"),
        };
        if p.node_description.is_empty() {
            return Err("empty 'Node Description'".into());
        }
        Ok(p)
    })?;
    let mut digests = t.digests.clone();
    let Ok(mut profile) = t.outcome else {
        log::warn!("local profile for node {} omitted: text reply unparseable", ev.node);
        return Ok(None);
    };
    let s = gateway.complete_typed(local_struct_messages(card, ev)?, &Schema::Object(LOCAL_STRUCT_FIELDS), |v| {
        Ok(text_at(&v, "Structural Preference"))
    })?;
    digests.extend(s.digests);
    match s.outcome {
        Ok(pref) => {
            profile.structural_preference = if is_not_significant(&pref) { NOT_SIGNIFICANT.to_owned() } else { pref };
            Ok(Some((profile, digests)))
        }
        Err(_) => {
            log::warn!("local profile for node {} omitted: structural reply unparseable", ev.node);
            Ok(None)
        }
    }
}

// ---------------------------------------------------------------------------
// Reflection

/// One surrogate prediction on a validation negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: Timestamp,
    pub hi: u64,
    pub cn: u64,
    pub dnf: u64,
    pub prediction: u8,
    pub correct: bool,
    pub digests: Vec<String>,
}

pub fn reflection_messages(summary: &str, trajectories: &[Trajectory], accuracy: f64) -> Result<Vec<ChatMessage>, PromptError> {
    let fps: Vec<String> = trajectories
        .iter()
        .filter(|t| !t.correct)
        .map(|t| {
            format!(
                "- Source Node {}, Destination Node {}: Historical Interaction Count {}, Common Neighbor Count {}, Destination Node Frequency {}; predicted 1, actual 0",
                t.src, t.dst, t.hi, t.cn, t.dnf
            )
        })
        .collect();
    let errors = if fps.is_empty() { String::from("None") } else { format!("\n{}", fps.join("\n")) };
    let fmt_block = render_section(AGENTS, "reflection_format", &Vars::new())?;
    Ok(alloc::vec![
        ChatMessage::system(render_section(AGENTS, "reflection_system", &Vars::new().set("example_format", &fmt_block))?),
        ChatMessage::user(render_section(
            AGENTS,
            "reflection_input",
            &Vars::new()
                .set("global_summary", summary)
                .set("accuracy", format!("{:.2}%", accuracy * 100.0))
                .set("error_samples", errors)
                .set("example_format", &fmt_block),
        )?),
    ])
}

/// Reflection over false positives; an unparseable reply leaves knowledge unchanged.
pub fn run_reflection(
    summary: &str,
    trajectories: &[Trajectory],
    accuracy: f64,
    gateway: &Gateway<'_>,
) -> Result<(ReflectionOutcome, Vec<String>), KnowledgeError> {
    let a = gateway.complete_typed(reflection_messages(summary, trajectories, accuracy)?, &Schema::Object(REFLECTION_FIELDS), |v| {
        let sig = text_at(&v, "Significance");
        if sig == "Significant" {
            let sup = text_at(&v, "Supplementation");
            if sup.is_empty() || is_not_significant(&sup) {
                return Err("significant reflection without a supplementation".into());
            }
            Ok(ReflectionOutcome { significance: Flag::Significant, supplementation: sup })
        } else {
            Ok(ReflectionOutcome::not_significant())
        }
    })?;
    match a.outcome {
        Ok(o) => Ok((o, a.digests)),
        Err(e) => {
            log::warn!("reflection reply unparseable, keeping knowledge unchanged: {}", e);
            Ok((ReflectionOutcome::not_significant(), a.digests))
        }
    }
}
