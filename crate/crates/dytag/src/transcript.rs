//! JSON-Lines transcripts: the append-only sink, loading, and hashing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dytag_core::llm::{GatewayError, ReplayBackend, TranscriptRecord, TranscriptSink};
use sha2::{Digest, Sha256};

/// Appends one record per line; writes are serialized and flushed per record.
#[derive(Debug)]
pub struct JsonlTranscript {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlTranscript {
    pub fn open(path: &Path) -> std::io::Result<JsonlTranscript> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlTranscript { path: path.to_owned(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl TranscriptSink for JsonlTranscript {
    fn append(&self, record: &TranscriptRecord) -> Result<(), GatewayError> {
        let mut line = serde_json::to_string(record).map_err(|e| GatewayError::Transcript(e.to_string()))?;
        line.push('\n');
        let mut f = self.file.lock().map_err(|e| GatewayError::Transcript(e.to_string()))?;
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| GatewayError::Transcript(format!("{}: {}", self.path.display(), e)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Record { path: PathBuf, line: usize, message: String },
}

/// Reads every record; blank lines are skipped.
pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, TranscriptError> {
    let io = |source| TranscriptError::Io { path: path.to_owned(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|e| TranscriptError::Record {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn replay_from_file(path: &Path) -> Result<ReplayBackend, TranscriptError> {
    let records = load_transcript(path)?;
    log::info!("loaded {} recorded calls from {}", records.len(), path.display());
    Ok(ReplayBackend::from_records(records))
}

/// Order-independent hash over request digests and response contents.
/// Wall time and latency are left out, so equal runs hash equally.
pub fn canonical_hash(records: &[TranscriptRecord]) -> String {
    let mut lines: Vec<String> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "backend": r.response.backend,
                "content": r.response.content,
                "request_digest": r.request_digest,
            })
            .to_string()
        })
        .collect();
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dytag_core::llm::{BackendKind, ChatMessage, ChatRequest, ChatResponse};

    fn record(content: &str, wall: u64) -> TranscriptRecord {
        let request = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user(content)],
            temperature: 0.0,
            max_tokens: 8,
            expect_structured: false,
        };
        TranscriptRecord {
            request_digest: request.digest(),
            request,
            response: ChatResponse { content: format!("re: {}", content), latency_ms: wall, backend: BackendKind::Mock },
            wall_time: wall,
        }
    }

    #[test]
    fn sink_roundtrip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let sink = JsonlTranscript::open(&p).unwrap();
        sink.append(&record("a", 1)).unwrap();
        sink.append(&record("b", 2)).unwrap();
        drop(sink);
        let back = load_transcript(&p).unwrap();
        assert_eq!(back, vec![record("a", 1), record("b", 2)]);
        assert_eq!(canonical_hash(&back), canonical_hash(&[record("b", 99), record("a", 5)]));
        assert_ne!(canonical_hash(&back), canonical_hash(&[record("a", 1)]));
    }

    #[test]
    fn bad_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(&p, format!("{}\n\nnot json\n", serde_json::to_string(&record("a", 0)).unwrap())).unwrap();
        let err = load_transcript(&p).unwrap_err().to_string();
        assert!(err.contains("t.jsonl:3: "), "{}", err);
    }
}
