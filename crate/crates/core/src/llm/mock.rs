//! Deterministic scripted backend and the shipped heuristic rule set.
//!
//! Rules are tried in order against the concatenated prompt text; the first
//! match answers. The heuristic responder recognises every prompt this crate
//! renders and answers like a cautious analyst: LP says yes iff HI>0 or CN>0,
//! NR scores by normalized HI, EC picks the modal historical label.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde_json::{json, Value};

use super::parse::parse_ordered_map;
use super::{BackendKind, ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::knowledge::Comparator;
use crate::prompt::{render, Vars};
use crate::stats::StructMetric;

/// The kind of prompt, recognised from fixed template phrases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Initial,
    Structure,
    TextLink,
    EdgeText,
    EdgeLabel,
    LocalText,
    LocalStructure,
    Reflection,
    Lp,
    Nr,
    Ec,
    Unknown,
}

const MARKERS: &[(&str, PromptKind)] = &[
    ("You are an expert agent specialized in processing dynamic graph datasets", PromptKind::Initial),
    ("You have distributions of structural statistics", PromptKind::Structure),
    ("Your task is to analyze the raw textual content of positive and negative pairs", PromptKind::TextLink),
    ("Your task is to evaluate the effectiveness of using node and edge textual content", PromptKind::EdgeText),
    ("You have the reoccurrence distributions of edge label preferences", PromptKind::EdgeLabel),
    ("Your task is to generate a comprehensive profile for a node", PromptKind::LocalText),
    ("Your task is to generate a comprehensive structural preference summary", PromptKind::LocalStructure),
    ("You are a reflection agent", PromptKind::Reflection),
    ("Predict the existence of an edge between", PromptKind::Lp),
    ("assign a probability between 0 and 1 to each Destination Node ID", PromptKind::Nr),
    ("Predict the class label for the edge between", PromptKind::Ec),
];

const HI_LINE: &str = "The total number of past interactions between Source ID ";
const CN_LINE: &str = "The number of shared neighbors between Source ID ";

/// Facts read back out of a rendered prompt's current sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptFacts {
    pub kind: Option<PromptKind>,
    pub hi: Option<u64>,
    pub cn: Option<u64>,
    pub dnf: Option<u64>,
    pub src_id: Option<String>,
    pub dst_id: Option<String>,
    /// NR candidates in prompt order with their HI values.
    pub candidates: Vec<(String, u64)>,
    pub classes: Vec<String>,
    pub pair_modal: Option<String>,
    pub src_modal: Option<String>,
}

fn number_after_colon(line: &str) -> Option<u64> {
    let (_, tail) = line.rsplit_once(':')?;
    let t = tail.trim();
    t.parse::<u64>().ok().or_else(|| t.parse::<f64>().ok().filter(|x| *x >= 0.0).map(|x| x as u64))
}

/// "... Destination ID 17: 3" → ("17", 3).
fn destination_value(line: &str) -> Option<(String, u64)> {
    let (_, rest) = line.split_once("Destination ID ")?;
    let (id, _) = rest.split_once(':')?;
    Some((id.trim().to_owned(), number_after_colon(line)?))
}

fn source_id(line: &str) -> Option<String> {
    let (_, rest) = line.split_once("Source ID ")?;
    let (id, _) = rest.split_once(" and ")?;
    Some(id.trim().to_owned())
}

fn first_key_of_object_in(line: &str) -> Option<String> {
    let start = line.find('{')?;
    let end = line.rfind('}')?;
    let pairs = parse_ordered_map(line.get(start..=end)?)?;
    pairs.into_iter().next().map(|(k, _)| k)
}

impl PromptFacts {
    pub fn extract(text: &str) -> PromptFacts {
        let kind = MARKERS.iter().find(|(m, _)| text.contains(m)).map(|(_, k)| *k);
        let sample = match text.rfind(" Current Sample:") {
            Some(i) => &text[i..],
            None => text,
        };
        let mut f = PromptFacts { kind, ..PromptFacts::default() };
        let mut his: Vec<(String, u64)> = Vec::new();
        let mut in_dst_metrics = false;
        for line in sample.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with(HI_LINE) {
                if let Some((d, v)) = destination_value(trimmed) {
                    f.hi.get_or_insert(v);
                    f.dst_id.get_or_insert(d.clone());
                    his.push((d, v));
                }
                if f.src_id.is_none() {
                    f.src_id = source_id(trimmed);
                }
            } else if trimmed.starts_with(CN_LINE) {
                if f.cn.is_none() {
                    f.cn = number_after_colon(trimmed);
                }
            } else if trimmed.starts_with("For Destination Node (") {
                in_dst_metrics = true;
            } else if in_dst_metrics && trimmed.starts_with("- Frequency:") {
                if f.dnf.is_none() {
                    f.dnf = number_after_colon(trimmed);
                }
                in_dst_metrics = false;
            } else if let Some(rest) = trimmed.strip_prefix("Destination Node ID ") {
                if let Some(id) = rest.strip_suffix(':') {
                    f.candidates.push((id.trim().to_owned(), 0));
                }
            } else if let Some(rest) = trimmed.strip_prefix("Edge Classes :") {
                if let (Some(a), Some(b)) = (rest.find('['), rest.rfind(']')) {
                    f.classes = serde_json::from_str::<Vec<String>>(&rest[a..=b]).unwrap_or_default();
                }
            } else if trimmed.starts_with("- Between Source Node (") {
                f.pair_modal = first_key_of_object_in(trimmed);
            } else if trimmed.starts_with("- Source Node (") && trimmed.contains("): {") {
                f.src_modal = first_key_of_object_in(trimmed);
            }
        }
        for c in f.candidates.iter_mut() {
            if let Some((_, v)) = his.iter().find(|(d, _)| *d == c.0) {
                c.1 = *v;
            }
        }
        f
    }

    fn metric(&self, m: StructMetric) -> u64 {
        match m {
            StructMetric::Hi => self.hi,
            StructMetric::Cn => self.cn,
            StructMetric::Dnf => self.dnf,
        }
        .unwrap_or(0)
    }

    fn vars(&self) -> Vars {
        let mut v = Vars::new()
            .set("hi", self.metric(StructMetric::Hi))
            .set("cn", self.metric(StructMetric::Cn))
            .set("dnf", self.metric(StructMetric::Dnf));
        if let Some(s) = &self.src_id {
            v.insert("src_id", s);
        }
        if let Some(d) = &self.dst_id {
            v.insert("dst_id", d);
        }
        if let Some(l) = self.pair_modal.as_ref().or(self.src_modal.as_ref()) {
            v.insert("modal_label", l);
        }
        v
    }
}

/// Predicate over prompt text.
#[derive(Clone)]
pub enum Matcher {
    Always,
    Substring(String),
    Kind(PromptKind),
    /// Metric of the current sample; a missing block reads as 0.
    Metric {
        metric: StructMetric,
        op: Comparator,
        value: f64,
    },
    All(Vec<Matcher>),
    Any(Vec<Matcher>),
    Not(Box<Matcher>),
    Custom(Arc<dyn Fn(&str) -> bool + Send + Sync>),
}

impl Matcher {
    pub fn matches(&self, text: &str, facts: &PromptFacts) -> bool {
        match self {
            Matcher::Always => true,
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Kind(k) => facts.kind == Some(*k),
            Matcher::Metric { metric, op, value } => op.holds(facts.metric(*metric) as f64, *value),
            Matcher::All(ms) => ms.iter().all(|m| m.matches(text, facts)),
            Matcher::Any(ms) => ms.iter().any(|m| m.matches(text, facts)),
            Matcher::Not(m) => !m.matches(text, facts),
            Matcher::Custom(f) => f(text),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Always => f.write_str("Always"),
            Matcher::Substring(s) => f.debug_tuple("Substring").field(s).finish(),
            Matcher::Kind(k) => f.debug_tuple("Kind").field(k).finish(),
            Matcher::Metric { metric, op, value } => write!(f, "Metric({} {} {})", metric, op.symbol(), value),
            Matcher::All(ms) => f.debug_tuple("All").field(ms).finish(),
            Matcher::Any(ms) => f.debug_tuple("Any").field(ms).finish(),
            Matcher::Not(m) => f.debug_tuple("Not").field(m).finish(),
            Matcher::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Responder {
    Fixed(String),
    /// Placeholders: {hi}, {cn}, {dnf}, {src_id}, {dst_id}, {modal_label}.
    Template(String),
    Heuristic,
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub matcher: Matcher,
    pub responder: Responder,
}

impl Rule {
    pub fn new(matcher: Matcher, responder: Responder) -> Self {
        Rule { matcher, responder }
    }
}

/// The heuristic analyst behind [`Responder::Heuristic`].
#[derive(Clone, Debug, Default)]
pub struct HeuristicAgent {
    /// Last-resort EC answer when neither pair nor source history exists.
    pub global_label: Option<String>,
}

fn level_for(diff: f64) -> &'static str {
    let d = if diff < 0.0 { -diff } else { diff };
    if d >= 0.5 {
        "Extremely Significant"
    } else if d >= 0.2 {
        "Helpful"
    } else if d >= 0.05 {
        "Maybe Related"
    } else {
        "Not Relevant"
    }
}

fn percent_after(line: &str, key: &str) -> Option<f64> {
    let (_, rest) = line.split_once(key)?;
    let end = rest.find('%')?;
    rest[..end].trim().parse().ok()
}

fn value_after(text: &str, prefix: &str) -> Option<String> {
    text.lines().find_map(|l| l.trim().strip_prefix(prefix).map(|v| v.trim().to_owned()))
}

impl HeuristicAgent {
    pub fn respond(&self, text: &str, facts: &PromptFacts) -> Option<String> {
        match facts.kind? {
            PromptKind::Lp => Some(if facts.metric(StructMetric::Hi) > 0 || facts.metric(StructMetric::Cn) > 0 { "1" } else { "0" }.into()),
            PromptKind::Nr => Some(self.retrieval(facts)),
            PromptKind::Ec => {
                let label = facts
                    .pair_modal
                    .clone()
                    .or_else(|| facts.src_modal.clone())
                    .or_else(|| self.global_label.clone())
                    .or_else(|| facts.classes.first().cloned())?;
                Some(json!({ "Prediction": label }).to_string())
            }
            PromptKind::Initial => Some(initial_card(text)),
            PromptKind::Structure => structure_reply(text),
            PromptKind::TextLink => Some(
                json!({
                    "Significance": "Not Relevant",
                    "Reason": "Node texts of positive and negative pairs look alike.",
                    "Explanation": "Text alone does not separate interacting from non-interacting pairs."
                })
                .to_string(),
            ),
            PromptKind::EdgeText => Some(
                json!({
                    "Node Text": {"Significance": "Maybe Related", "Reason": "Node texts carry some context.", "Explanation": "Use node text only as weak supporting evidence."},
                    "Edge Text": {"Significance": "Helpful", "Reason": "Edge texts vary with the label.", "Explanation": "Match the topic of the edge text to the label names."}
                })
                .to_string(),
            ),
            PromptKind::EdgeLabel => Some(eld_reply(text)),
            PromptKind::LocalText => Some(local_text_reply(text)),
            PromptKind::LocalStructure => Some(local_structure_reply(text)),
            PromptKind::Reflection => Some(reflection_reply(text)),
            PromptKind::Unknown => None,
        }
    }

    fn retrieval(&self, facts: &PromptFacts) -> String {
        let max = facts.candidates.iter().map(|c| c.1).max().unwrap_or(0);
        let parts: Vec<String> = facts
            .candidates
            .iter()
            .map(|(id, hi)| {
                let p = if max == 0 { 0.0 } else { *hi as f64 / max as f64 };
                format!("{}: {}", Value::String(id.clone()), Value::from(p))
            })
            .collect();
        format!("{{{}}}", parts.join(", "))
    }
}

const CARD_KEYS: [(&str, &str); 6] = [
    ("task_type", "future link prediction, node retrieval and future edge classification"),
    ("graph_type", "dynamic text-attributed"),
    ("node_type", "entities"),
    ("node_text_type", "a short description of the entity"),
    ("edge_type", "interaction"),
    ("edge_text_type", "the content of the interaction"),
];

fn initial_card(text: &str) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("thought".into(), "Extract the dataset semantics from the description.".into());
    obj.insert("speak".into(), "Dataset card prepared.".into());
    for (key, default) in CARD_KEYS {
        let found = text.lines().find_map(|l| {
            let (k, v) = l.trim().split_once(':')?;
            (k.trim() == key && !v.trim().is_empty()).then(|| v.trim().to_owned())
        });
        obj.insert(key.into(), Value::String(found.unwrap_or_else(|| default.to_owned())));
    }
    Value::Object(obj).to_string()
}

fn structure_reply(text: &str) -> Option<String> {
    let dists: Vec<Vec<(String, Value)>> = text
        .lines()
        .filter_map(|l| {
            let t = l.trim();
            let is_metric = ["- Historical interaction count:", "- Common neighbors:", "- Destination Node Frequency:"]
                .iter()
                .any(|p| t.starts_with(p));
            if !is_metric {
                return None;
            }
            let start = t.find('{')?;
            parse_ordered_map(&t[start..])
        })
        .collect();
    if dists.len() != 6 {
        return None;
    }
    let get = |d: &Vec<(String, Value)>, key: &str| -> f64 {
        d.iter().find(|(k, _)| k.ends_with(key) && k.len() > key.len()).and_then(|(_, v)| v.as_f64()).unwrap_or(0.0)
    };
    let names = ["Historical Interaction", "Common Neighbors", "Destination Node Frequency"];
    let mut obj = serde_json::Map::new();
    let mut clauses = Vec::new();
    let mut strong = Vec::new();
    for (i, metric) in StructMetric::ALL.iter().enumerate() {
        let (pos, neg) = (&dists[i], &dists[i + 3]);
        let (p, n) = (get(pos, ">0"), get(neg, ">0"));
        let diff = p - n;
        let level = level_for(diff);
        let favors = if diff > 0.0 {
            "high"
        } else if diff < 0.0 {
            "low"
        } else {
            "none"
        };
        let is_strong = level == "Extremely Significant" || level == "Helpful";
        let m = metric.short();
        let (pos_ind, neg_ind) = match favors {
            "high" => (format!("{} > 0", m), format!("{} = 0", m)),
            "low" => (format!("{} = 0", m), format!("{} > 0", m)),
            _ => (String::from("none"), String::from("none")),
        };
        if is_strong {
            strong.push(m);
            match favors {
                "high" => clauses.push(json!({"metric": m, "op": "<", "value": 1})),
                "low" => {
                    if let Some(k) = (0..=5).find(|k| get(pos, &format!(">{}", k)) <= 0.05) {
                        clauses.push(json!({"metric": m, "op": ">", "value": k}));
                    }
                }
                _ => {}
            }
        }
        obj.insert(
            names[i].into(),
            json!({
                "Significance": level,
                "Favors": favors,
                "Explanation": format!("{} > 0 holds for {:.0}% of positive samples versus {:.0}% of negative samples.", m, p * 100.0, n * 100.0),
                "Positive Indicator": pos_ind,
                "Negative Indicator": neg_ind,
            }),
        );
    }
    let overall_neg = if clauses.is_empty() {
        String::from("none")
    } else {
        clauses
            .iter()
            .map(|c| format!("{} {} {}", c["metric"].as_str().unwrap_or(""), c["op"].as_str().unwrap_or(""), c["value"]))
            .collect::<Vec<_>>()
            .join(" and ")
    };
    obj.insert(
        "Overall Structural Indicators".into(),
        json!({"Positive Indicator": "see per-metric indicators", "Negative Indicator": overall_neg}),
    );
    let report = if strong.is_empty() {
        String::from("No structural metric separates positive from negative samples reliably.")
    } else {
        format!("The metrics {} separate positive from negative samples.", strong.join(", "))
    };
    obj.insert("Structure Rules and Report".into(), Value::String(report));
    let threshold = if clauses.is_empty() { Value::Null } else { json!({"combinator": "AND", "clauses": clauses}) };
    obj.insert("Negative Threshold".into(), threshold);
    Some(Value::Object(obj).to_string())
}

fn eld_reply(text: &str) -> String {
    let mut best = 0.0f64;
    let mut any_counted = false;
    for l in text.lines().filter(|l| l.contains("historical edge label reoccurrence distribution:")) {
        if let Some(top1) = percent_after(l, "\"top1\":") {
            best = best.max(top1);
        }
        if let Some(c) = l.split_once("(counted samples:").and_then(|(_, r)| r.trim_end_matches(')').trim().parse::<u64>().ok()) {
            any_counted |= c > 0;
        }
    }
    let level = if !any_counted {
        "Not Relevant"
    } else if best >= 50.0 {
        "Extremely Significant"
    } else if best >= 30.0 {
        "Helpful"
    } else if best > 0.0 {
        "Maybe Related"
    } else {
        "Not Relevant"
    };
    let explanation = if level == "Not Relevant" {
        "Historical labels do not indicate future labels."
    } else {
        "Use the most frequent historical edge label for predicting future edge labels."
    };
    json!({
        "Significance": level,
        "Reason": format!("The most frequent historical label recurs in up to {:.2}% of samples.", best),
        "Explanation": explanation,
    })
    .to_string()
}

fn local_text_reply(text: &str) -> String {
    let node_text = text.lines().find_map(|l| l.trim().split_once(") text:").map(|(_, v)| v.trim().to_owned())).unwrap_or_default();
    let interactions = text.lines().filter(|l| l.trim_start().starts_with("- t=")).count();
    let labels: Vec<(String, Value)> =
        value_after(text, "Edge label distribution of the node:").and_then(|v| parse_ordered_map(&v)).unwrap_or_default();
    let description = if node_text.is_empty() { String::from("Not Significant") } else { format!("A node described as '{}'.", node_text) };
    let neighbor = if interactions >= 3 {
        format!("Prefers the recurring neighbors seen across its {} recent interactions.", interactions)
    } else {
        String::from("Not Significant")
    };
    let label_pref = if labels.is_empty() {
        String::from("Not Significant")
    } else {
        let parts: Vec<String> = labels.iter().take(3).map(|(k, v)| format!("'{}' ({})", k, v.as_str().unwrap_or(""))).collect();
        format!("The node prefers edges with labels {}.", parts.join(", "))
    };
    json!({
        "Node Description": description,
        "Neighbor Preference": neighbor,
        "Edge Text Preference": "Not Significant",
        "Edge Label Preference": label_pref,
        "Explanation": format!("Based on {} recent interactions and the node's label distribution.", interactions),
    })
    .to_string()
}

fn local_structure_reply(text: &str) -> String {
    let num = |p: &str| value_after(text, p).and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0);
    let freq = num("- Frequency:");
    let avg = num("- Average Frequency of Neighbors:");
    let pref = if freq < 5.0 {
        "Not Significant"
    } else if avg >= 5.0 {
        "The node prefers well-established and highly connected neighbors."
    } else {
        "The node prefers new or less active neighbors."
    };
    json!({ "Structural Preference": pref }).to_string()
}

fn reflection_reply(text: &str) -> String {
    let accuracy = value_after(text, "Accuracy:").and_then(|v| v.trim_end_matches('%').trim().parse::<f64>().ok()).unwrap_or(0.0);
    let fps: Vec<(u64, u64)> = text
        .lines()
        .filter(|l| l.contains("predicted 1, actual 0"))
        .filter_map(|l| {
            let hi = l.split_once("Historical Interaction Count ")?.1.split(',').next()?.trim().parse().ok()?;
            let cn = l.split_once("Common Neighbor Count ")?.1.split(',').next()?.trim().parse().ok()?;
            Some((hi, cn))
        })
        .collect();
    if accuracy >= 90.0 || fps.is_empty() {
        return json!({"Significance": "Not Significant", "Supplementation": ""}).to_string();
    }
    let cold_hi_with_cn = fps.iter().filter(|(h, c)| *h == 0 && *c > 0).count();
    let sentence = if 2 * cold_hi_with_cn >= fps.len() {
        "When historical interaction count is 0 and common neighbors are high, then prioritize textual analysis to avoid false positives due to lack of contextual relevance."
    } else {
        "When historical interaction count is positive but common neighbors are 0, then require additional evidence before predicting a link."
    };
    json!({"Significance": "Significant", "Supplementation": sentence}).to_string()
}

/// The shipped rule set: explicit LP rules, then the heuristic for everything else.
pub fn heuristic_rules() -> Vec<Rule> {
    use crate::knowledge::Comparator::Gt;
    alloc::vec![
        Rule::new(
            Matcher::All(alloc::vec![
                Matcher::Kind(PromptKind::Lp),
                Matcher::Any(alloc::vec![
                    Matcher::Metric { metric: StructMetric::Hi, op: Gt, value: 0.0 },
                    Matcher::Metric { metric: StructMetric::Cn, op: Gt, value: 0.0 },
                ]),
            ]),
            Responder::Fixed("1".into()),
        ),
        Rule::new(Matcher::Kind(PromptKind::Lp), Responder::Fixed("0".into())),
        Rule::new(Matcher::Always, Responder::Heuristic),
    ]
}

#[derive(Clone, Debug)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    heuristic: HeuristicAgent,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>, heuristic: HeuristicAgent) -> Result<Self, GatewayError> {
        if rules.is_empty() {
            return Err(GatewayError::Config("scripted backend needs at least one rule".into()));
        }
        Ok(ScriptedBackend { rules, heuristic })
    }

    /// The default "heuristic mock".
    pub fn heuristic(global_label: Option<String>) -> Self {
        ScriptedBackend { rules: heuristic_rules(), heuristic: HeuristicAgent { global_label } }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let text = request.prompt_text();
        let facts = PromptFacts::extract(&text);
        for rule in &self.rules {
            if !rule.matcher.matches(&text, &facts) {
                continue;
            }
            let content = match &rule.responder {
                Responder::Fixed(s) => Some(s.clone()),
                Responder::Template(t) => {
                    Some(render(t, &facts.vars()).map_err(|e| GatewayError::Config(format!("mock template: {}", e)))?)
                }
                Responder::Heuristic => self.heuristic.respond(&text, &facts),
            };
            if let Some(content) = content {
                return Ok(ChatResponse { content, latency_ms: 0, backend: BackendKind::Mock });
            }
        }
        Err(GatewayError::MockMiss { digest: request.digest() })
    }
}
