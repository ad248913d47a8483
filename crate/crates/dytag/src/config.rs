//! Run configuration: one JSON document, validated all at once.

use std::fmt;
use std::path::{Path, PathBuf};

use dytag_core::predict::{PromptMode, Task};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::http::API_KEY_VAR;

pub const DEFAULT_EVAL_WINDOW: usize = 10_240;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Auto,
    Canonical,
    Dtgb,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub name: String,
    pub dir: PathBuf,
    pub format: DatasetFormat,
    pub bipartite: bool,
    /// Free-text description handed to the initial agent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Mock,
    Http,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Mock rule file; the shipped heuristic rules when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    /// Recorded transcript to replay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    pub timeout_s: u64,
    pub max_in_flight: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub eval_window: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub tasks: Vec<Task>,
    pub modes: Vec<PromptMode>,
    pub use_edge_text: bool,
    pub directed: bool,
    pub local_fraction: f64,
    pub local_cap: usize,
    pub text_count: usize,
    pub truncation: usize,
    pub trajectories: usize,
    pub per_batch: bool,
    pub force: bool,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript_path: Option<PathBuf>,
}

/// Keys that only say where things live; they never change results.
const LOCATION_KEYS: &[&str] = &["out_dir", "knowledge_path", "transcript_path", "force"];

impl RunConfig {
    /// A mock-backed config over `dir` with every default in place.
    pub fn for_dataset(dir: &Path, name: &str, out_dir: &Path) -> RunConfig {
        let mut errors = Vec::new();
        let doc = serde_json::json!({"dataset": {"dir": dir, "name": name}, "out_dir": out_dir});
        let cfg = build(doc.as_object().expect("object"), Path::new(""), &mut errors, &|_| None);
        debug_assert!(errors.is_empty(), "{:?}", errors);
        cfg.expect("defaults validate")
    }

    /// Hash of every result-affecting setting, defaults included.
    ///
    /// Of the backend only the model name counts, so a recorded run and its
    /// replay carry the same digest.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        for k in LOCATION_KEYS {
            obj.remove(*k);
        }
        if let Some(Value::Object(d)) = obj.get_mut("dataset") {
            d.remove("dir");
        }
        obj.insert("backend".into(), serde_json::json!({ "model": self.backend.model }));
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("{} invalid configuration value(s):\n{}", .0.len(), .0.iter().map(|i| format!("  - {}", i)).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Unreadable { .. } => &[],
        }
    }
}

/// Reads and validates a config file; relative paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable { path: path.to_owned(), source })?;
    let base = path.parent().unwrap_or(Path::new(""));
    validate_config(&text, base, &|k| std::env::var(k).ok())
}

/// Validates a config document. `env` looks up environment variables.
pub fn validate_config(text: &str, base: &Path, env: &dyn Fn(&str) -> Option<String>) -> Result<RunConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| ConfigError::Invalid(vec![ConfigIssue { key: "<document>".into(), message: format!("not valid JSON: {}", e) }]))?;
    let Some(obj) = doc.as_object() else {
        return Err(ConfigError::Invalid(vec![ConfigIssue { key: "<document>".into(), message: "expected a JSON object".into() }]));
    };
    let mut errors = Vec::new();
    match build(obj, base, &mut errors, env) {
        Some(cfg) if errors.is_empty() => Ok(cfg),
        _ => Err(ConfigError::Invalid(errors)),
    }
}

const TOP_KEYS: &[&str] = &[
    "dataset",
    "backend",
    "seed",
    "temperature",
    "max_tokens",
    "eval_window",
    "batch_size",
    "train_fraction",
    "valid_fraction",
    "tasks",
    "modes",
    "use_edge_text",
    "directed",
    "local_fraction",
    "local_cap",
    "text_count",
    "truncation",
    "trajectories",
    "per_batch",
    "force",
    "out_dir",
    "knowledge_path",
    "transcript_path",
];
const DATASET_KEYS: &[&str] = &["name", "dir", "format", "bipartite", "description"];
const BACKEND_KEYS: &[&str] = &[
    "kind",
    "model",
    "endpoint",
    "rules",
    "transcript",
    "max_retries",
    "backoff_initial_ms",
    "backoff_max_ms",
    "timeout_s",
    "max_in_flight",
];

/// Closest known key, when one is close enough to be a plausible typo.
pub fn suggest<'k>(key: &str, known: &[&'k str]) -> Option<&'k str> {
    let lower = key.to_ascii_lowercase();
    known.iter().map(|k| (strsim::levenshtein(&lower, k), *k)).filter(|(d, k)| *d <= 2.max(k.len() / 3)).min().map(|(_, k)| k)
}

struct Reader<'a, 'e> {
    prefix: &'static str,
    obj: &'a Map<String, Value>,
    errors: &'e mut Vec<ConfigIssue>,
}

impl<'a, 'e> Reader<'a, 'e> {
    fn new(prefix: &'static str, obj: &'a Map<String, Value>, known: &[&str], errors: &'e mut Vec<ConfigIssue>) -> Self {
        for k in obj.keys() {
            if !known.contains(&k.as_str()) {
                let message = match suggest(k, known) {
                    Some(s) => format!("unknown key; did you mean \"{}\"?", s),
                    None => "unknown key".to_owned(),
                };
                errors.push(ConfigIssue { key: format!("{}{}", prefix, k), message });
            }
        }
        Reader { prefix, obj, errors }
    }

    fn fail(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(ConfigIssue { key: format!("{}{}", self.prefix, key), message: message.into() });
    }

    fn uint(&mut self, key: &str, default: u64, min: u64) -> u64 {
        match self.obj.get(key) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(n) if n >= min => n,
                Some(_) => {
                    self.fail(key, format!("must be at least {}", min));
                    default
                }
                None if v.as_i64().is_some_and(|n| n < 0) => {
                    self.fail(key, "must be non-negative");
                    default
                }
                None => {
                    self.fail(key, "must be a non-negative integer");
                    default
                }
            },
        }
    }

    fn real(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, rule: &str) -> f64 {
        match self.obj.get(key) {
            None => default,
            Some(v) => match v.as_f64() {
                Some(x) if ok(x) => x,
                _ => {
                    self.fail(key, format!("must be a number {}", rule));
                    default
                }
            },
        }
    }

    fn flag(&mut self, key: &str) -> bool {
        match self.obj.get(key) {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                self.fail(key, "must be true or false");
                false
            }
        }
    }

    fn text(&mut self, key: &str) -> Option<String> {
        match self.obj.get(key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
            Some(_) => {
                self.fail(key, "must be a non-empty string");
                None
            }
        }
    }

    fn path(&mut self, key: &str, base: &Path) -> Option<PathBuf> {
        self.text(key).map(|s| base.join(s))
    }

    fn names<T: Copy>(&mut self, key: &str, default: &[T], parse: impl Fn(&str) -> Option<T>, choices: &str) -> Vec<T> {
        let Some(v) = self.obj.get(key) else {
            return default.to_vec();
        };
        let Some(list) = v.as_array().filter(|l| !l.is_empty()) else {
            self.fail(key, format!("must be a non-empty list drawn from {}", choices));
            return default.to_vec();
        };
        let mut out = Vec::new();
        for item in list {
            match item.as_str().and_then(&parse) {
                Some(t) => out.push(t),
                None => self.fail(key, format!("unknown entry {}; expected one of {}", item, choices)),
            }
        }
        out
    }

    fn object(&mut self, key: &str) -> Option<&'a Map<String, Value>> {
        match self.obj.get(key) {
            Some(Value::Object(o)) => Some(o),
            None => None,
            Some(_) => {
                self.fail(key, "must be an object");
                None
            }
        }
    }
}

fn build(obj: &Map<String, Value>, base: &Path, errors: &mut Vec<ConfigIssue>, env: &dyn Fn(&str) -> Option<String>) -> Option<RunConfig> {
    let empty = Map::new();
    let (dataset_obj, backend_obj);
    {
        let mut r = Reader::new("", obj, TOP_KEYS, errors);
        dataset_obj = r.object("dataset");
        backend_obj = r.object("backend").unwrap_or(&empty);
        if dataset_obj.is_none() && !obj.contains_key("dataset") {
            r.fail("dataset", "required");
        }
    }

    let dataset = {
        let d = dataset_obj.unwrap_or(&empty);
        let mut r = Reader::new("dataset.", d, DATASET_KEYS, errors);
        let dir = r.path("dir", base);
        match &dir {
            None if dataset_obj.is_some() => r.fail("dir", "required"),
            Some(p) if !p.is_dir() => r.fail("dir", format!("{} is not a directory", p.display())),
            _ => {}
        }
        let format = match r.text("format").as_deref() {
            None | Some("auto") => DatasetFormat::Auto,
            Some("canonical") => DatasetFormat::Canonical,
            Some("dtgb") => DatasetFormat::Dtgb,
            Some(other) => {
                r.fail("format", format!("'{}' is not one of auto, canonical, dtgb", other));
                DatasetFormat::Auto
            }
        };
        let dir = dir.unwrap_or_default();
        let name =
            r.text("name").unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()));
        DatasetConfig { name, dir, format, bipartite: r.flag("bipartite"), description: r.text("description") }
    };

    let backend = {
        let mut r = Reader::new("backend.", backend_obj, BACKEND_KEYS, errors);
        let kind = match r.text("kind").as_deref() {
            None | Some("mock") => BackendChoice::Mock,
            Some("http") => BackendChoice::Http,
            Some("replay") => BackendChoice::Replay,
            Some(other) => {
                r.fail("kind", format!("'{}' is not one of mock, http, replay", other));
                BackendChoice::Mock
            }
        };
        let endpoint = r.text("endpoint");
        let rules = r.path("rules", base);
        let transcript = r.path("transcript", base);
        match kind {
            BackendChoice::Http => {
                if endpoint.is_none() {
                    r.fail("endpoint", "required for the http backend");
                }
                if env(API_KEY_VAR).map_or(true, |k| k.trim().is_empty()) {
                    r.fail("kind", format!("http backend needs the {} environment variable", API_KEY_VAR));
                }
            }
            BackendChoice::Replay => match &transcript {
                None => r.fail("transcript", "required for the replay backend"),
                Some(p) if !p.is_file() => r.fail("transcript", format!("{} does not exist", p.display())),
                _ => {}
            },
            BackendChoice::Mock => {
                if let Some(p) = rules.as_ref().filter(|p| !p.is_file()) {
                    r.fail("rules", format!("{} does not exist", p.display()));
                }
            }
        }
        let default_model = if kind == BackendChoice::Mock { "mock-heuristic" } else { "" };
        let model = r.text("model").unwrap_or_else(|| default_model.to_owned());
        if model.is_empty() {
            r.fail("model", "required for http and replay backends");
        }
        let backoff_initial_ms = r.uint("backoff_initial_ms", 500, 0);
        let backoff_max_ms = r.uint("backoff_max_ms", 8_000, 0);
        if backoff_max_ms < backoff_initial_ms {
            r.fail("backoff_max_ms", "must not be below backoff_initial_ms");
        }
        BackendConfig {
            kind,
            model,
            endpoint,
            rules,
            transcript,
            max_retries: r.uint("max_retries", 3, 1).min(u32::MAX as u64) as u32,
            backoff_initial_ms,
            backoff_max_ms,
            timeout_s: r.uint("timeout_s", 120, 1),
            max_in_flight: r.uint("max_in_flight", 8, 1) as usize,
        }
    };

    let mut r = Reader { prefix: "", obj, errors };
    let unit_open = |x: f64| x > 0.0 && x < 1.0;
    let train_fraction = r.real("train_fraction", 0.7, unit_open, "in (0, 1)");
    let valid_fraction = r.real("valid_fraction", 0.15, unit_open, "in (0, 1)");
    if train_fraction + valid_fraction >= 1.0 {
        r.fail("valid_fraction", "train_fraction + valid_fraction must be below 1");
    }
    let cfg = RunConfig {
        seed: r.uint("seed", 0, 0),
        temperature: r.real("temperature", 0.0, |x| x >= 0.0 && x.is_finite(), ">= 0"),
        max_tokens: r.uint("max_tokens", 1024, 1).min(u32::MAX as u64) as u32,
        eval_window: r.uint("eval_window", DEFAULT_EVAL_WINDOW as u64, 1) as usize,
        batch_size: r.uint("batch_size", DEFAULT_BATCH_SIZE as u64, 1) as usize,
        train_fraction,
        valid_fraction,
        tasks: r.names("tasks", &Task::ALL, Task::parse, "lp, nr, ec"),
        modes: r.names("modes", &[PromptMode::Gad], PromptMode::parse, "text, text-fewshot, structure, structure-fewshot, gad"),
        use_edge_text: r.flag("use_edge_text"),
        directed: r.flag("directed"),
        local_fraction: r.real("local_fraction", 0.1, |x| (0.0..=1.0).contains(&x), "in [0, 1]"),
        local_cap: r.uint("local_cap", 30, 1) as usize,
        text_count: r.uint("text_count", 30, 1) as usize,
        truncation: r.uint("truncation", 50, 1) as usize,
        trajectories: r.uint("trajectories", 50, 0) as usize,
        per_batch: r.flag("per_batch"),
        force: r.flag("force"),
        out_dir: r.path("out_dir", base).unwrap_or_else(|| base.join("runs").join(&dataset.name)),
        knowledge_path: r.path("knowledge_path", base),
        transcript_path: r.path("transcript_path", base),
        dataset,
        backend,
    };
    if let (Some(src), Some(dst)) = (&cfg.backend.transcript, &cfg.transcript_path) {
        if src == dst && cfg.backend.kind == BackendChoice::Replay {
            r.fail("transcript_path", "must differ from the replayed transcript");
        }
    }
    if let Some(p) = cfg.knowledge_path.as_ref().filter(|p| !p.is_file()) {
        r.fail("knowledge_path", format!("{} does not exist", p.display()));
    }
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn base() -> &'static Path {
        static BASE: std::sync::OnceLock<PathBuf> = std::sync::OnceLock::new();
        BASE.get_or_init(|| {
            let b = std::env::temp_dir().join(format!("dytag-config-tests-{}", std::process::id()));
            for d in ["d", "data/enron", "elsewhere"] {
                std::fs::create_dir_all(b.join(d)).unwrap();
            }
            b
        })
    }

    fn check(text: &str) -> Result<RunConfig, ConfigError> {
        validate_config(text, base(), &no_env)
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = check(r#"{"dataset": {"dir": "data/enron"}}"#).unwrap();
        assert_eq!(c.eval_window, 10_240);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.max_tokens, 1024);
        assert_eq!((c.train_fraction, c.valid_fraction), (0.7, 0.15));
        assert_eq!((c.text_count, c.truncation, c.local_cap, c.trajectories), (30, 50, 30, 50));
        assert_eq!(c.local_fraction, 0.1);
        assert_eq!(c.backend.max_retries, 3);
        assert_eq!(c.backend.max_in_flight, 8);
        assert_eq!(c.backend.kind, BackendChoice::Mock);
        assert_eq!(c.tasks, Task::ALL.to_vec());
        assert_eq!(c.modes, vec![PromptMode::Gad]);
        assert_eq!(c.dataset.dir, base().join("data/enron"));
        assert_eq!(c.dataset.name, "enron");
        assert_eq!(c.out_dir, base().join("runs/enron"));
    }

    #[test]
    fn negative_seed_is_one_error() {
        let e = check(r#"{"dataset": {"dir": "d"}, "seed": -3}"#).unwrap_err();
        assert_eq!(e.issues().len(), 1);
        assert_eq!(e.issues()[0].key, "seed");
    }

    #[test]
    fn unknown_key_suggests() {
        let e = check(r#"{"dataset": {"dir": "d"}, "batchsize": 12}"#).unwrap_err();
        assert_eq!(e.issues().len(), 1);
        assert_eq!(e.issues()[0].key, "batchsize");
        assert!(e.issues()[0].message.contains("\"batch_size\""));
        let e = check(r#"{"dataset": {"dir": "d", "bipartit": true}, "zzzzzzzzzz": 1}"#).unwrap_err();
        assert_eq!(e.issues()[0].to_string(), "zzzzzzzzzz: unknown key");
        assert_eq!(e.issues()[1].to_string(), "dataset.bipartit: unknown key; did you mean \"bipartite\"?");
    }

    #[test]
    fn every_error_is_reported() {
        let e = check(r#"{"dataset": {"dir": "d"}, "seed": "x", "batch_size": 0, "tasks": ["lp", "bogus"], "train_fraction": 0.9, "valid_fraction": 0.2}"#)
            .unwrap_err();
        let keys: Vec<&str> = e.issues().iter().map(|i| i.key.as_str()).collect();
        assert_eq!(keys, vec!["valid_fraction", "seed", "batch_size", "tasks"]);
    }

    #[test]
    fn http_needs_credentials_before_anything_else() {
        let e = check(r#"{"dataset": {"dir": "d"}, "backend": {"kind": "http", "endpoint": "http://x", "model": "m"}}"#).unwrap_err();
        assert_eq!(e.issues().len(), 1);
        assert!(e.issues()[0].message.contains("LLM_API_KEY"));
        let env = |k: &str| (k == "LLM_API_KEY").then(|| "secret".to_owned());
        assert!(validate_config(
            r#"{"dataset": {"dir": "d"}, "backend": {"kind": "http", "endpoint": "http://x", "model": "m"}}"#,
            base(),
            &env
        )
        .is_ok());
    }

    #[test]
    fn digest_ignores_locations_only() {
        let a = check(r#"{"dataset": {"dir": "d", "name": "x"}, "out_dir": "o1"}"#).unwrap();
        let b = check(r#"{"dataset": {"dir": "elsewhere", "name": "x"}, "out_dir": "o2", "force": true}"#).unwrap();
        let c = check(r#"{"dataset": {"dir": "d", "name": "x"}, "seed": 1}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut r = a.clone();
        r.backend.kind = BackendChoice::Replay;
        r.backend.transcript = Some("t.jsonl".into());
        assert_eq!(a.digest(), r.digest());
        r.backend.model = "other".into();
        assert_ne!(a.digest(), r.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
