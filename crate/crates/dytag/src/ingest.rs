//! CSV ingestion, export and the binary store cache.
//!
//! The canonical layout is four UTF-8 files:
//!
//! | file            | header                        |
//! |-----------------|-------------------------------|
//! | edges.csv       | `src,dst,ts,label,text_id`    |
//! | node_texts.csv  | `node_id,text`                |
//! | edge_texts.csv  | `text_id,text`                |
//! | labels.csv      | `label_id,text`               |
//!
//! `text_id` may be empty. DTGB dataset directories are read through
//! [`import_dtgb`], which maps that benchmark's column names onto the same parts.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dytag_core::{DyTagStore, LabelId, NodeId, StoreError, StoreParts, TemporalEdge, TextId, Timestamp};
use serde::{Deserialize, Serialize};

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Row { path: PathBuf, line: u64, message: String },
    #[error("{}: no column named {wanted} in header [{header}]", path.display())]
    Header { path: PathBuf, wanted: String, header: String },
    #[error("{}: {message}", path.display())]
    Cache { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_owned(), source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub edges: PathBuf,
    pub node_texts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_texts: Option<PathBuf>,
    pub labels: PathBuf,
    #[serde(default)]
    pub bipartite: bool,
}

impl DatasetFiles {
    /// The canonical file names inside `dir`.
    pub fn in_dir(dir: &Path, bipartite: bool) -> Self {
        DatasetFiles {
            edges: dir.join("edges.csv"),
            node_texts: dir.join("node_texts.csv"),
            edge_texts: Some(dir.join("edge_texts.csv")),
            labels: dir.join("labels.csv"),
            bipartite,
        }
    }
}

/// Column lookup by any of several accepted names; `lenient` also accepts
/// integral floats such as `3.0` for ids.
struct Table {
    path: PathBuf,
    reader: csv::Reader<BufReader<File>>,
    header: csv::StringRecord,
    lenient: bool,
}

impl Table {
    fn open(path: &Path, lenient: bool) -> Result<Table, IngestError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(BufReader::new(file));
        let header = reader.headers().map_err(|e| IngestError::Row { path: path.to_owned(), line: 1, message: e.to_string() })?.clone();
        Ok(Table { path: path.to_owned(), reader, header, lenient })
    }

    fn column(&self, names: &[&str]) -> Option<usize> {
        names.iter().find_map(|n| self.header.iter().position(|h| h.trim().eq_ignore_ascii_case(n)))
    }

    fn require(&self, names: &[&str]) -> Result<usize, IngestError> {
        self.column(names).ok_or_else(|| IngestError::Header {
            path: self.path.clone(),
            wanted: names.join(" or "),
            header: self.header.iter().collect::<Vec<_>>().join(","),
        })
    }

    fn rows(&mut self) -> impl Iterator<Item = Result<(u64, csv::StringRecord), IngestError>> + '_ {
        let path = self.path.clone();
        self.reader.records().map(move |r| {
            r.map(|rec| (rec.position().map(|p| p.line()).unwrap_or(0), rec)).map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                IngestError::Row { path: path.clone(), line, message: e.to_string() }
            })
        })
    }

    fn row_err(&self, line: u64, message: String) -> IngestError {
        IngestError::Row { path: self.path.clone(), line, message }
    }

    fn int(&self, rec: &csv::StringRecord, col: usize, line: u64, what: &str) -> Result<u64, IngestError> {
        let raw = rec.get(col).unwrap_or("").trim();
        if let Ok(v) = raw.parse::<u64>() {
            return Ok(v);
        }
        if self.lenient {
            if let Ok(f) = raw.parse::<f64>() {
                if f >= 0.0 && f.fract() == 0.0 && f < 1e18 {
                    return Ok(f as u64);
                }
            }
        }
        Err(self.row_err(line, format!("{} '{}' is not a non-negative integer", what, raw)))
    }
}

fn read_edges(path: &Path, lenient: bool, cols: [&[&str]; 5]) -> Result<Vec<TemporalEdge>, IngestError> {
    let mut t = Table::open(path, lenient)?;
    let (src, dst, ts, label) = (t.require(cols[0])?, t.require(cols[1])?, t.require(cols[2])?, t.require(cols[3])?);
    let text = t.column(cols[4]);
    let rows: Vec<_> = t.rows().collect::<Result<_, _>>()?;
    let mut edges = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        let ts_raw = rec.get(ts).unwrap_or("").trim();
        let stamp = ts_raw
            .parse::<f64>()
            .ok()
            .and_then(Timestamp::new)
            .ok_or_else(|| t.row_err(line, format!("timestamp '{}' is not a non-negative number", ts_raw)))?;
        let text_id = match text.map(|c| rec.get(c).unwrap_or("").trim()) {
            None | Some("") => None,
            Some(_) => Some(TextId(t.int(&rec, text.unwrap_or(0), line, "text_id")?)),
        };
        let label_id = t.int(&rec, label, line, "label")?;
        let label_id = u32::try_from(label_id).map_err(|_| t.row_err(line, format!("label {} out of range", label_id)))?;
        edges.push(TemporalEdge {
            src: NodeId(t.int(&rec, src, line, "src")?),
            dst: NodeId(t.int(&rec, dst, line, "dst")?),
            ts: stamp,
            label: LabelId(label_id),
            text_id,
        });
    }
    if edges.is_empty() {
        return Err(StoreError::EmptyEdges.into());
    }
    Ok(edges)
}

fn read_texts(path: &Path, lenient: bool, id_cols: &[&str], text_cols: &[&str]) -> Result<Vec<(u64, String)>, IngestError> {
    let mut t = Table::open(path, lenient)?;
    let (id, text) = (t.require(id_cols)?, t.require(text_cols)?);
    let rows: Vec<_> = t.rows().collect::<Result<_, _>>()?;
    rows.into_iter().map(|(line, rec)| Ok((t.int(&rec, id, line, "id")?, rec.get(text).unwrap_or("").to_owned()))).collect()
}

const EDGE_COLS: [&[&str]; 5] = [&["src"], &["dst"], &["ts"], &["label"], &["text_id"]];

/// Reads the canonical four files without validating cross references.
pub fn read_parts(files: &DatasetFiles) -> Result<StoreParts, IngestError> {
    let edges = read_edges(&files.edges, false, EDGE_COLS)?;
    let node_texts = read_texts(&files.node_texts, false, &["node_id"], &["text"])?;
    let edge_texts = match &files.edge_texts {
        Some(p) => read_texts(p, false, &["text_id"], &["text"])?,
        None => Vec::new(),
    };
    let labels = read_texts(&files.labels, false, &["label_id"], &["text"])?;
    let labels = labels
        .into_iter()
        .map(|(id, text)| {
            Ok((
                LabelId(
                    u32::try_from(id)
                        .map_err(|_| IngestError::Cache { path: files.labels.clone(), message: format!("label id {} out of range", id) })?,
                ),
                text,
            ))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    Ok(StoreParts {
        edges,
        node_texts: node_texts.into_iter().map(|(i, t)| (NodeId(i), t)).collect(),
        edge_texts: edge_texts.into_iter().map(|(i, t)| (TextId(i), t)).collect(),
        labels,
        bipartite: files.bipartite,
    })
}

pub fn ingest_dataset(files: &DatasetFiles) -> Result<DyTagStore, IngestError> {
    let store = DyTagStore::from_parts(read_parts(files)?)?;
    log::info!(
        "ingested {} nodes, {} edges, {} labels from {}",
        store.num_nodes(),
        store.num_edges(),
        store.num_labels(),
        files.edges.display()
    );
    Ok(store)
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| IngestError::Cache { path: path.to_owned(), message: e.to_string() };
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the store back out in the canonical layout.
pub fn export_dataset(store: &DyTagStore, dir: &Path) -> Result<DatasetFiles, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = DatasetFiles::in_dir(dir, store.is_bipartite());
    let parts = store.to_parts();
    write_csv(
        &files.edges,
        &["src", "dst", "ts", "label", "text_id"],
        parts.edges.iter().map(|e| {
            vec![
                e.src.to_string(),
                e.dst.to_string(),
                e.ts.to_string(),
                e.label.to_string(),
                e.text_id.map(|t| t.0.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    write_csv(&files.node_texts, &["node_id", "text"], parts.node_texts.iter().map(|(n, t)| vec![n.to_string(), t.clone()]))?;
    if let Some(p) = &files.edge_texts {
        write_csv(p, &["text_id", "text"], parts.edge_texts.iter().map(|(n, t)| vec![n.0.to_string(), t.clone()]))?;
    }
    write_csv(&files.labels, &["label_id", "text"], parts.labels.iter().map(|(n, t)| vec![n.to_string(), t.clone()]))?;
    Ok(files)
}

#[derive(Serialize, Deserialize)]
struct Cached {
    format_version: u32,
    parts: StoreParts,
}

pub fn save_store(store: &DyTagStore, path: &Path) -> Result<(), IngestError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    ciborium::into_writer(&Cached { format_version: CACHE_VERSION, parts: store.to_parts() }, &mut w)
        .map_err(|e| IngestError::Cache { path: path.to_owned(), message: e.to_string() })?;
    w.flush().map_err(io_err(path))
}

pub fn load_store(path: &Path) -> Result<DyTagStore, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let cached: Cached =
        ciborium::from_reader(BufReader::new(file)).map_err(|e| IngestError::Cache { path: path.to_owned(), message: e.to_string() })?;
    if cached.format_version != CACHE_VERSION {
        return Err(IngestError::Cache {
            path: path.to_owned(),
            message: format!("cache format version {}, expected {}", cached.format_version, CACHE_VERSION),
        });
    }
    Ok(DyTagStore::from_parts(cached.parts)?)
}

// ---------------------------------------------------------------------------
// DTGB adapter

const DTGB_EDGE_COLS: [&[&str]; 5] = [
    &["u", "src", "source"],
    &["i", "v", "dst", "destination"],
    &["ts", "timestamp", "time"],
    &["label", "label_id"],
    &["r", "text_id", "relation", "edge_text_id"],
];
const DTGB_LABEL_FILES: [&str; 4] = ["label_text.csv", "labels.csv", "edge_label.csv", "label.csv"];

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Reads a DTGB dataset directory (`edge_list.csv`, `entity_text.csv`,
/// `relation_text.csv`, optional label text file).
///
/// Nodes without a text row get an empty text; labels without a text file
/// are named by their id.
pub fn import_dtgb(dir: &Path, bipartite: bool) -> Result<StoreParts, IngestError> {
    let edges = read_edges(&dir.join("edge_list.csv"), true, DTGB_EDGE_COLS)?;
    let mut node_texts: Vec<(NodeId, String)> = match first_existing(dir, &["entity_text.csv", "node_text.csv"]) {
        Some(p) => read_texts(&p, true, &["i", "id", "node_id"], &["text"])?.into_iter().map(|(i, t)| (NodeId(i), t)).collect(),
        None => Vec::new(),
    };
    node_texts.sort_by_key(|(n, _)| *n);
    node_texts.dedup_by_key(|(n, _)| *n);
    let known: BTreeSet<NodeId> = node_texts.iter().map(|(n, _)| *n).collect();
    let missing: BTreeSet<NodeId> = edges.iter().flat_map(|e| [e.src, e.dst]).filter(|n| !known.contains(n)).collect();
    if !missing.is_empty() {
        log::warn!("{} nodes have no text row; using empty text", missing.len());
    }
    node_texts.extend(missing.into_iter().map(|n| (n, String::new())));

    let mut edge_texts: Vec<(TextId, String)> = match first_existing(dir, &["relation_text.csv", "edge_text.csv"]) {
        Some(p) => read_texts(&p, true, &["i", "id", "text_id"], &["text"])?.into_iter().map(|(i, t)| (TextId(i), t)).collect(),
        None => Vec::new(),
    };
    edge_texts.sort_by_key(|(t, _)| *t);
    edge_texts.dedup_by_key(|(t, _)| *t);
    let texts: BTreeSet<TextId> = edge_texts.iter().map(|(t, _)| *t).collect();
    let mut edges = edges;
    for e in edges.iter_mut() {
        if e.text_id.is_some_and(|t| !texts.contains(&t)) {
            e.text_id = None;
        }
    }

    let used: BTreeSet<LabelId> = edges.iter().map(|e| e.label).collect();
    let mut labels: Vec<(LabelId, String)> = match first_existing(dir, &DTGB_LABEL_FILES) {
        Some(p) => read_texts(&p, true, &["i", "id", "label_id", "label"], &["text", "label_text", "name"])?
            .into_iter()
            .filter_map(|(i, t)| u32::try_from(i).ok().map(|i| (LabelId(i), t)))
            .collect(),
        None => Vec::new(),
    };
    labels.sort_by_key(|(l, _)| *l);
    labels.dedup_by_key(|(l, _)| *l);
    let named: BTreeSet<LabelId> = labels.iter().map(|(l, _)| *l).collect();
    labels.extend(used.into_iter().filter(|l| !named.contains(l)).map(|l| (l, format!("label {}", l))));
    labels.sort_by_key(|(l, _)| *l);
    Ok(StoreParts { edges, node_texts, edge_texts, labels, bipartite })
}

/// Either layout: canonical files when `edges.csv` exists, DTGB otherwise.
pub fn load_dataset_dir(dir: &Path, bipartite: bool) -> Result<DyTagStore, IngestError> {
    if dir.join("edges.csv").is_file() {
        let mut files = DatasetFiles::in_dir(dir, bipartite);
        if files.edge_texts.as_ref().is_some_and(|p| !p.is_file()) {
            files.edge_texts = None;
        }
        ingest_dataset(&files)
    } else {
        Ok(DyTagStore::from_parts(import_dtgb(dir, bipartite)?)?)
    }
}
