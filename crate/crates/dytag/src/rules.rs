//! Mock rule files.
//!
//! A rule file is a JSON list; each entry has a `match` object and a
//! `respond` value:
//!
//! ```json
//! [
//!   {"match": {"kind": "lp", "metric": {"metric": "HI", "op": ">", "value": 0}}, "respond": "1"},
//!   {"match": {"regex": "Destination ID \\d+: 0$"}, "respond": {"fixed": "0"}},
//!   {"match": {"always": true}, "respond": {"heuristic": true}}
//! ]
//! ```
//!
//! Keys inside one `match` object are combined with AND. Supported keys:
//! `always`, `substring`, `regex`, `kind`, `metric`, `all`, `any`, `not`.
//! A bare string response is a template over `{hi}`, `{cn}`, `{dnf}`,
//! `{src_id}`, `{dst_id}` and `{modal_label}`.

use std::path::Path;
use std::sync::Arc;

use dytag_core::knowledge::Comparator;
use dytag_core::llm::{HeuristicAgent, Matcher, PromptKind, Responder, Rule, ScriptedBackend};
use dytag_core::stats::StructMetric;
use serde_json::Value;

pub const KIND_NAMES: &[(&str, PromptKind)] = &[
    ("initial", PromptKind::Initial),
    ("structure", PromptKind::Structure),
    ("text-link", PromptKind::TextLink),
    ("edge-text", PromptKind::EdgeText),
    ("edge-label", PromptKind::EdgeLabel),
    ("local-text", PromptKind::LocalText),
    ("local-structure", PromptKind::LocalStructure),
    ("reflection", PromptKind::Reflection),
    ("lp", PromptKind::Lp),
    ("nr", PromptKind::Nr),
    ("ec", PromptKind::Ec),
];

#[derive(Debug, thiserror::Error)]
pub enum RuleFileError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("rule {index}: {message}")]
    Rule { index: usize, message: String },
}

fn matcher_from(v: &Value) -> Result<Matcher, String> {
    let obj = v.as_object().ok_or("match must be an object")?;
    if obj.is_empty() {
        return Err("empty match object".into());
    }
    let mut parts = Vec::new();
    for (k, val) in obj {
        let m = match k.as_str() {
            "always" => match val.as_bool() {
                Some(true) => Matcher::Always,
                _ => return Err("'always' must be true".into()),
            },
            "substring" => Matcher::Substring(val.as_str().ok_or("'substring' must be a string")?.to_owned()),
            "regex" => {
                let src = val.as_str().ok_or("'regex' must be a string")?;
                let re = regex::RegexBuilder::new(src).multi_line(true).build().map_err(|e| format!("bad regex: {}", e))?;
                Matcher::Custom(Arc::new(move |text: &str| re.is_match(text)))
            }
            "kind" => {
                let name = val.as_str().ok_or("'kind' must be a string")?;
                let kind = KIND_NAMES
                    .iter()
                    .find(|(n, _)| n.eq_ignore_ascii_case(name))
                    .map(|(_, k)| *k)
                    .ok_or_else(|| format!("unknown prompt kind '{}'", name))?;
                Matcher::Kind(kind)
            }
            "metric" => {
                let metric = val
                    .get("metric")
                    .and_then(Value::as_str)
                    .and_then(StructMetric::parse)
                    .ok_or("'metric.metric' must be one of HI, CN, DNF")?;
                let op = val
                    .get("op")
                    .and_then(Value::as_str)
                    .and_then(Comparator::parse)
                    .ok_or("'metric.op' must be one of <, <=, >, >=, =")?;
                let value = val.get("value").and_then(Value::as_f64).ok_or("'metric.value' must be a number")?;
                Matcher::Metric { metric, op, value }
            }
            "all" | "any" => {
                let list = val.as_array().ok_or_else(|| format!("'{}' must be a list", k))?;
                let ms = list.iter().map(matcher_from).collect::<Result<Vec<_>, _>>()?;
                if k == "all" {
                    Matcher::All(ms)
                } else {
                    Matcher::Any(ms)
                }
            }
            "not" => Matcher::Not(Box::new(matcher_from(val)?)),
            other => return Err(format!("unknown match key '{}'", other)),
        };
        parts.push(m);
    }
    Ok(if parts.len() == 1 { parts.remove(0) } else { Matcher::All(parts) })
}

fn responder_from(v: &Value) -> Result<Responder, String> {
    match v {
        Value::String(t) => Ok(Responder::Template(t.clone())),
        Value::Object(o) if o.len() == 1 => {
            let (k, val) = o.iter().next().expect("one key");
            match (k.as_str(), val) {
                ("template", Value::String(t)) => Ok(Responder::Template(t.clone())),
                ("fixed", Value::String(t)) => Ok(Responder::Fixed(t.clone())),
                ("heuristic", Value::Bool(true)) => Ok(Responder::Heuristic),
                _ => Err(format!("unsupported respond form '{}'", k)),
            }
        }
        _ => Err("respond must be a string or an object with one of template, fixed, heuristic".into()),
    }
}

pub fn parse_rules(text: &str) -> Result<Vec<Rule>, RuleFileError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| RuleFileError::Read { path: "<rules>".into(), message: e.to_string() })?;
    let list = doc.as_array().ok_or(RuleFileError::Read { path: "<rules>".into(), message: "expected a JSON list".into() })?;
    if list.is_empty() {
        return Err(RuleFileError::Read { path: "<rules>".into(), message: "rule list is empty".into() });
    }
    list.iter()
        .enumerate()
        .map(|(index, r)| {
            let err = |message: String| RuleFileError::Rule { index, message };
            let obj = r.as_object().ok_or_else(|| err("rule must be an object".into()))?;
            if let Some(k) = obj.keys().find(|k| *k != "match" && *k != "respond") {
                return Err(err(format!("unknown key '{}'", k)));
            }
            let m = matcher_from(obj.get("match").ok_or_else(|| err("missing 'match'".into()))?).map_err(err)?;
            let resp = responder_from(obj.get("respond").ok_or_else(|| err("missing 'respond'".into()))?).map_err(err)?;
            Ok(Rule::new(m, resp))
        })
        .collect()
}

pub fn load_rules(path: &Path) -> Result<Vec<Rule>, RuleFileError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| RuleFileError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_rules(&text).map_err(|e| match e {
        RuleFileError::Read { message, .. } => RuleFileError::Read { path: path.display().to_string(), message },
        other => other,
    })
}

/// A scripted backend from a rule file, with the heuristic analyst behind
/// any `heuristic` responses.
pub fn backend_from_file(path: &Path, global_label: Option<String>) -> Result<ScriptedBackend, RuleFileError> {
    let rules = load_rules(path)?;
    ScriptedBackend::new(rules, HeuristicAgent { global_label })
        .map_err(|e| RuleFileError::Read { path: path.display().to_string(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dytag_core::llm::{ChatBackend, ChatMessage, ChatRequest, GatewayError};

    fn req(text: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user(text)],
            temperature: 0.0,
            max_tokens: 8,
            expect_structured: false,
        }
    }

    const LP: &str = "Predict the existence of an edge between the two nodes.\n Current Sample:\n\
        The total number of past interactions between Source ID 1 and Destination ID 2: 2\n\
        The number of shared neighbors between Source ID 1 and Destination ID 2: 0";

    #[test]
    fn rule_file_drives_backend() {
        let rules = parse_rules(
            r#"[
              {"match": {"kind": "lp", "metric": {"metric": "HI", "op": ">=", "value": 2}}, "respond": "yes {hi}"},
              {"match": {"regex": "^zebra$"}, "respond": {"fixed": "stripes"}},
              {"match": {"not": {"substring": "never"}}, "respond": {"fixed": "fallthrough"}}
            ]"#,
        )
        .unwrap();
        let b = ScriptedBackend::new(rules, HeuristicAgent::default()).unwrap();
        assert_eq!(b.complete(&req(LP)).unwrap().content, "yes 2");
        assert_eq!(b.complete(&req("a\nzebra\nb")).unwrap().content, "stripes");
        assert_eq!(b.complete(&req("other")).unwrap().content, "fallthrough");
        assert!(matches!(b.complete(&req("never")), Err(GatewayError::MockMiss { .. })));
    }

    #[test]
    fn malformed_rules_name_the_entry() {
        let e = parse_rules(r#"[{"match": {"always": true}, "respond": "x"}, {"match": {"kind": "zz"}, "respond": "x"}]"#).unwrap_err();
        assert_eq!(e.to_string(), "rule 1: unknown prompt kind 'zz'");
        assert!(parse_rules("[]").is_err());
        assert!(parse_rules(r#"[{"match": {"regex": "("}, "respond": "x"}]"#).is_err());
        assert!(parse_rules(r#"[{"match": {"always": true}, "respond": "x", "extra": 1}]"#).is_err());
    }
}
