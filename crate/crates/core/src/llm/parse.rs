//! Extracting and validating JSON answers from free-form model output.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde_json::Value;

use super::GatewayError;

/// Expected value kind of one object field.
#[derive(Clone, Copy, Debug)]
pub enum Kind {
    String,
    Number,
    /// Case-insensitive member of a closed vocabulary; normalized to the listed spelling.
    OneOf(&'static [&'static str]),
    Object(&'static [Field]),
    /// Object, array or null; shape checked by the consumer.
    Any,
}

#[derive(Clone, Copy, Debug)]
pub struct Field {
    pub key: &'static str,
    pub kind: Kind,
    pub required: bool,
}

impl Field {
    pub const fn required(key: &'static str, kind: Kind) -> Self {
        Field { key, kind, required: true }
    }

    pub const fn optional(key: &'static str, kind: Kind) -> Self {
        Field { key, kind, required: false }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Schema {
    /// A bare 0 or 1, optionally quoted, fenced or wrapped as {"Prediction": 0|1}.
    Binary,
    /// Object of numeric values in [0, 1]; key order preserved.
    ProbabilityMap,
    Object(&'static [Field]),
}

const PREDICTION_FIELDS: &[Field] = &[Field::required("Prediction", Kind::String)];

impl Schema {
    pub const fn edge_class() -> Schema {
        Schema::Object(PREDICTION_FIELDS)
    }
}

fn parse_error(message: impl Into<String>, raw: &str) -> GatewayError {
    GatewayError::Parse { message: message.into(), raw: raw.to_owned() }
}

/// Drops markdown code fences, keeping the fenced body.
fn strip_fences(content: &str) -> String {
    let mut out = String::with_capacity(content.len());
    for line in content.lines() {
        if line.trim_start().starts_with("```") {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// The first syntactically valid JSON object embedded in `content`, as raw text.
pub fn extract_json_object(content: &str) -> Option<String> {
    let body = strip_fences(content);
    for (i, _) in body.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&body[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(_))) = stream.next() {
            let end = i + stream.byte_offset();
            return Some(body[i..end].to_owned());
        }
    }
    None
}

struct OrderedPairs(Vec<(String, Value)>);

impl<'de> serde::Deserialize<'de> for OrderedPairs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedPairs;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<OrderedPairs, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(OrderedPairs(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses a JSON object keeping its key order (later duplicates are kept too).
pub fn parse_ordered_map(object_text: &str) -> Option<Vec<(String, Value)>> {
    serde_json::from_str::<OrderedPairs>(object_text).ok().map(|p| p.0)
}

fn check_fields(obj: &mut serde_json::Map<String, Value>, fields: &[Field], path: &str) -> Result<(), String> {
    for f in fields {
        let here = if path.is_empty() { f.key.to_string() } else { format!("{}.{}", path, f.key) };
        let Some(v) = obj.get_mut(f.key) else {
            if f.required {
                return Err(format!("missing key '{}'", here));
            }
            continue;
        };
        match f.kind {
            Kind::String => {
                if !v.is_string() {
                    return Err(format!("'{}' must be a string", here));
                }
            }
            Kind::Number => {
                if let Some(s) = v.as_str() {
                    match s.trim().parse::<f64>() {
                        Ok(x) if x.is_finite() => *v = Value::from(x),
                        _ => return Err(format!("'{}' must be a number", here)),
                    }
                } else if !v.is_number() {
                    return Err(format!("'{}' must be a number", here));
                }
            }
            Kind::OneOf(vocab) => {
                let s = v.as_str().ok_or_else(|| format!("'{}' must be a string", here))?;
                let t = s.trim();
                match vocab.iter().find(|w| w.eq_ignore_ascii_case(t)) {
                    Some(w) => *v = Value::String((*w).to_owned()),
                    None => return Err(format!("'{}' has unknown value '{}'", here, t)),
                }
            }
            Kind::Object(inner) => {
                let o = v.as_object_mut().ok_or_else(|| format!("'{}' must be an object", here))?;
                check_fields(o, inner, &here)?;
            }
            Kind::Any => {}
        }
    }
    Ok(())
}

fn parse_binary(content: &str) -> Option<u8> {
    let body = strip_fences(content);
    let t = body.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
    match t {
        "0" => return Some(0),
        "1" => return Some(1),
        _ => {}
    }
    let obj = extract_json_object(&body)?;
    let v: Value = serde_json::from_str(&obj).ok()?;
    let p = v.get("Prediction").or_else(|| v.get("prediction"))?;
    match p {
        Value::Number(n) => match n.as_u64() {
            Some(0) => Some(0),
            Some(1) => Some(1),
            _ => None,
        },
        Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Parses `content` against `schema`, returning the normalized JSON value.
///
/// Binary answers come back as the number 0 or 1; probability maps as an
/// array of `[key, probability]` pairs in the model's key order.
pub fn parse_structured(content: &str, schema: &Schema) -> Result<Value, GatewayError> {
    match schema {
        Schema::Binary => parse_binary(content).map(Value::from).ok_or_else(|| parse_error("expected a bare 0 or 1", content)),
        Schema::ProbabilityMap => {
            let obj = extract_json_object(content).ok_or_else(|| parse_error("no JSON object found", content))?;
            let pairs = parse_ordered_map(&obj).ok_or_else(|| parse_error("no JSON object found", content))?;
            let mut out = Vec::with_capacity(pairs.len());
            for (k, v) in pairs {
                let p = match &v {
                    Value::Number(n) => n.as_f64(),
                    Value::String(s) => s.trim().parse::<f64>().ok(),
                    _ => None,
                };
                match p {
                    Some(p) if (0.0..=1.0).contains(&p) => {
                        out.push(Value::Array(alloc::vec![Value::String(k.trim().to_owned()), Value::from(p)]))
                    }
                    _ => return Err(parse_error(format!("probability for '{}' is not a number in [0, 1]", k), content)),
                }
            }
            Ok(Value::Array(out))
        }
        Schema::Object(fields) => {
            let obj = extract_json_object(content).ok_or_else(|| parse_error("no JSON object found", content))?;
            let mut v: Value = serde_json::from_str(&obj).map_err(|e| parse_error(e.to_string(), content))?;
            let map = v.as_object_mut().ok_or_else(|| parse_error("not an object", content))?;
            check_fields(map, fields, "").map_err(|m| parse_error(m, content))?;
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_edge_class() {
        let v = parse_structured("```json\n{\"Prediction\": \"personal\"}\n```", &Schema::edge_class()).unwrap();
        assert_eq!(v["Prediction"], "personal");
    }

    #[test]
    fn probability_map_keeps_order() {
        let v = parse_structured("{\"17\": 0.9, \"23\": 0.1}", &Schema::ProbabilityMap).unwrap();
        let pairs = v.as_array().unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0][0], "17");
        assert_eq!(pairs[0][1], 0.9);
        assert_eq!(pairs[1][0], "23");
        assert!(parse_structured("{\"17\": 1.5}", &Schema::ProbabilityMap).is_err());
        assert!(parse_structured("{\"17\": \"high\"}", &Schema::ProbabilityMap).is_err());
    }

    #[test]
    fn binary_rejects_prose() {
        assert!(parse_structured("I think the answer is 1", &Schema::Binary).is_err());
        assert_eq!(parse_structured(" 1\n", &Schema::Binary).unwrap(), 1);
        assert_eq!(parse_structured("'0'", &Schema::Binary).unwrap(), 0);
        assert_eq!(parse_structured("```\n1\n```", &Schema::Binary).unwrap(), 1);
        assert_eq!(parse_structured("{\"Prediction\": 1}", &Schema::Binary).unwrap(), 1);
        assert!(parse_structured("2", &Schema::Binary).is_err());
    }

    #[test]
    fn object_extraction_skips_prose_and_bad_braces() {
        let raw = "Sure {not json} here you go: {\"Prediction\": \"A\"} trailing";
        assert_eq!(extract_json_object(raw).unwrap(), "{\"Prediction\": \"A\"}");
        assert!(extract_json_object("no braces").is_none());
    }

    const LEVELS: &[&str] = &["Extremely Significant", "Helpful"];
    const INNER: &[Field] = &[Field::required("Significance", Kind::OneOf(LEVELS)), Field::optional("Score", Kind::Number)];
    const OUTER: &[Field] = &[Field::required("Metric", Kind::Object(INNER))];

    #[test]
    fn nested_fields_and_vocabulary() {
        let v = parse_structured("{\"Metric\": {\"Significance\": \" helpful \", \"Score\": \"3\"}}", &Schema::Object(OUTER)).unwrap();
        assert_eq!(v["Metric"]["Significance"], "Helpful");
        assert_eq!(v["Metric"]["Score"], 3.0);
        let err = parse_structured("{\"Metric\": {\"Significance\": \"Vital\"}}", &Schema::Object(OUTER)).unwrap_err();
        match err {
            GatewayError::Parse { message, raw } => {
                assert!(message.contains("Metric.Significance"));
                assert!(raw.contains("Vital"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_structured("{\"Other\": 1}", &Schema::Object(OUTER)).is_err());
    }
}
