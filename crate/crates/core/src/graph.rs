//! Timestamped, text-attributed edge stream with per-node incidence indexes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::metrics::{self, Direction};

/// External node identifier as it appears in the dataset files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into the label vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u32);

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into the edge-text table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextId(pub u64);

/// Opaque, non-negative, finite timestamp in dataset units.
///
/// Totally ordered; construction rejects NaN, infinities and negative values.
#[derive(Clone, Copy, Debug, Serialize)]
#[serde(transparent)]
pub struct Timestamp(f64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0.0);

    pub fn new(value: f64) -> Option<Self> {
        if value.is_finite() && value >= 0.0 {
            // normalise -0.0
            Some(Timestamp(value + 0.0))
        } else {
            None
        }
    }

    pub fn from_int(value: u64) -> Self {
        Timestamp(value as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(deserializer)?;
        Timestamp::new(raw).ok_or_else(|| serde::de::Error::custom("timestamp must be finite and non-negative"))
    }
}

impl PartialEq for Timestamp {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Timestamp {}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 9.0e15 && (self.0 as u64) as f64 == self.0 {
            write!(f, "{}", self.0 as u64)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: Timestamp,
    pub label: LabelId,
    pub text_id: Option<TextId>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("edge list is empty")]
    EmptyEdges,
    #[error("edge row {row}: unknown {kind} node {node}")]
    DanglingNode { row: usize, kind: &'static str, node: NodeId },
    #[error("edge row {row}: unknown label {label}")]
    DanglingLabel { row: usize, label: LabelId },
    #[error("edge row {row}: unknown edge text {}", .text.0)]
    DanglingText { row: usize, text: TextId },
    #[error("duplicate node id {0} in node text table")]
    DuplicateNode(NodeId),
    #[error("duplicate label id {0} in label table")]
    DuplicateLabel(LabelId),
    #[error("duplicate edge text id {} in edge text table", .0 .0)]
    DuplicateText(TextId),
    #[error("chronological split needs at least 3 edges, store has {0}")]
    TooFewEdges(usize),
    #[error("invalid split fractions train={train}, valid={valid}")]
    InvalidFractions { train: f64, valid: f64 },
}

/// Flat, serializable content of a store; indexes are rebuilt on load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreParts {
    pub edges: Vec<TemporalEdge>,
    pub node_texts: Vec<(NodeId, String)>,
    pub edge_texts: Vec<(TextId, String)>,
    pub labels: Vec<(LabelId, String)>,
    pub bipartite: bool,
}

/// Immutable, indexed dynamic text-attributed graph.
///
/// Edges are kept in stable chronological order. Nodes and labels are mapped
/// onto dense indices so the per-node incidence lists and metric counters are
/// plain vectors.
#[derive(Clone, Debug)]
pub struct DyTagStore {
    edges: Vec<TemporalEdge>,
    edge_src: Vec<u32>,
    edge_dst: Vec<u32>,
    edge_label: Vec<u32>,
    node_ids: Vec<NodeId>,
    node_texts: Vec<String>,
    labels: Vec<(LabelId, String)>,
    edge_texts: BTreeMap<TextId, String>,
    out_inc: Vec<Vec<u32>>,
    in_inc: Vec<Vec<u32>>,
    bipartite: bool,
}

impl DyTagStore {
    /// Validates the parts, re-sorts edges stably by timestamp and builds indexes.
    ///
    /// Error rows refer to the position in `parts.edges` as given.
    pub fn from_parts(parts: StoreParts) -> Result<Self, StoreError> {
        let StoreParts { edges, mut node_texts, mut edge_texts, mut labels, bipartite } = parts;
        if edges.is_empty() {
            return Err(StoreError::EmptyEdges);
        }

        node_texts.sort_by_key(|(id, _)| *id);
        if let Some(w) = node_texts.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(StoreError::DuplicateNode(w[0].0));
        }
        labels.sort_by_key(|(id, _)| *id);
        if let Some(w) = labels.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(StoreError::DuplicateLabel(w[0].0));
        }
        edge_texts.sort_by_key(|(id, _)| *id);
        if let Some(w) = edge_texts.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(StoreError::DuplicateText(w[0].0));
        }

        let node_ids: Vec<NodeId> = node_texts.iter().map(|(id, _)| *id).collect();
        let label_ids: Vec<LabelId> = labels.iter().map(|(id, _)| *id).collect();
        let edge_texts: BTreeMap<TextId, String> = edge_texts.into_iter().collect();

        for (row, e) in edges.iter().enumerate() {
            if node_ids.binary_search(&e.src).is_err() {
                return Err(StoreError::DanglingNode { row, kind: "source", node: e.src });
            }
            if node_ids.binary_search(&e.dst).is_err() {
                return Err(StoreError::DanglingNode { row, kind: "destination", node: e.dst });
            }
            if label_ids.binary_search(&e.label).is_err() {
                return Err(StoreError::DanglingLabel { row, label: e.label });
            }
            if let Some(text) = e.text_id {
                if !edge_texts.contains_key(&text) {
                    return Err(StoreError::DanglingText { row, text });
                }
            }
        }

        let mut edges = edges;
        if edges.windows(2).any(|w| w[0].ts > w[1].ts) {
            log::info!("edge stream not chronological; re-sorting stably by timestamp");
            edges.sort_by_key(|e| e.ts);
        }

        let n = node_ids.len();
        let mut out_inc = alloc::vec![Vec::new(); n];
        let mut in_inc = alloc::vec![Vec::new(); n];
        let mut edge_src = Vec::with_capacity(edges.len());
        let mut edge_dst = Vec::with_capacity(edges.len());
        let mut edge_label = Vec::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            let s = node_ids.binary_search(&e.src).unwrap_or_default() as u32;
            let d = node_ids.binary_search(&e.dst).unwrap_or_default() as u32;
            let l = label_ids.binary_search(&e.label).unwrap_or_default() as u32;
            out_inc[s as usize].push(i as u32);
            in_inc[d as usize].push(i as u32);
            edge_src.push(s);
            edge_dst.push(d);
            edge_label.push(l);
        }

        Ok(DyTagStore {
            edges,
            edge_src,
            edge_dst,
            edge_label,
            node_ids,
            node_texts: node_texts.into_iter().map(|(_, t)| t).collect(),
            labels,
            edge_texts,
            out_inc,
            in_inc,
            bipartite,
        })
    }

    /// Flattens the store back into its parts (edges in stored order).
    pub fn to_parts(&self) -> StoreParts {
        StoreParts {
            edges: self.edges.clone(),
            node_texts: self.node_ids.iter().copied().zip(self.node_texts.iter().cloned()).collect(),
            edge_texts: self.edge_texts.iter().map(|(k, v)| (*k, v.clone())).collect(),
            labels: self.labels.clone(),
            bipartite: self.bipartite,
        }
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &TemporalEdge {
        &self.edges[index]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn is_bipartite(&self) -> bool {
        self.bipartite
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    pub fn labels(&self) -> &[(LabelId, String)] {
        &self.labels
    }

    pub fn contains_node(&self, node: NodeId) -> bool {
        self.node_index(node).is_some()
    }

    /// Node text, `None` for unregistered nodes. Registered nodes may have empty text.
    pub fn node_text(&self, node: NodeId) -> Option<&str> {
        self.node_index(node).map(|i| self.node_texts[i as usize].as_str())
    }

    pub fn label_text(&self, label: LabelId) -> Option<&str> {
        self.labels.binary_search_by_key(&label, |(id, _)| *id).ok().map(|i| self.labels[i].1.as_str())
    }

    /// Case-folded, trimmed exact match of a label's text.
    pub fn label_by_text(&self, text: &str) -> Option<LabelId> {
        let wanted = text.trim().to_lowercase();
        self.labels.iter().find(|(_, t)| t.trim().to_lowercase() == wanted).map(|(id, _)| *id)
    }

    pub fn edge_text(&self, text: TextId) -> Option<&str> {
        self.edge_texts.get(&text).map(String::as_str)
    }

    pub fn edge_text_of(&self, index: usize) -> Option<&str> {
        self.edges[index].text_id.and_then(|t| self.edge_text(t))
    }

    /// Set of node ids that occur as a destination anywhere in the stream.
    pub fn destination_partition(&self) -> Vec<NodeId> {
        let mut seen = BTreeSet::new();
        for &d in &self.edge_dst {
            seen.insert(d);
        }
        seen.into_iter().map(|d| self.node_ids[d as usize]).collect()
    }

    /// Incident edges of `node` as source (`outgoing == true`) or destination, in time order.
    pub fn incidence(&self, node: NodeId, outgoing: bool) -> &[u32] {
        match self.node_index(node) {
            Some(i) if outgoing => &self.out_inc[i as usize],
            Some(i) => &self.in_inc[i as usize],
            None => &[],
        }
    }

    /// Historical neighbor set N_t(node), undirected reading.
    pub fn neighbors_before(&self, node: NodeId, t: Timestamp) -> BTreeSet<NodeId> {
        self.neighbors_before_with(node, t, Direction::Undirected)
    }

    pub fn neighbors_before_with(&self, node: NodeId, t: Timestamp, direction: Direction) -> BTreeSet<NodeId> {
        match self.node_index(node) {
            Some(i) => metrics::neighbor_indices(self, i, t, direction).into_iter().map(|n| self.node_ids[n as usize]).collect(),
            None => {
                log::warn!("neighbors_before: node {} is not registered", node);
                BTreeSet::new()
            }
        }
    }

    // Dense-index accessors used by the metric engine.

    pub(crate) fn node_index(&self, node: NodeId) -> Option<u32> {
        self.node_ids.binary_search(&node).ok().map(|i| i as u32)
    }

    pub(crate) fn dense_src(&self, edge: u32) -> u32 {
        self.edge_src[edge as usize]
    }

    pub(crate) fn dense_dst(&self, edge: u32) -> u32 {
        self.edge_dst[edge as usize]
    }

    pub(crate) fn dense_label(&self, edge: u32) -> u32 {
        self.edge_label[edge as usize]
    }

    pub(crate) fn label_at(&self, dense: u32) -> LabelId {
        self.labels[dense as usize].0
    }

    pub(crate) fn out_list(&self, node: u32) -> &[u32] {
        &self.out_inc[node as usize]
    }

    pub(crate) fn in_list(&self, node: u32) -> &[u32] {
        &self.in_inc[node as usize]
    }

    pub(crate) fn ts_of(&self, edge: u32) -> Timestamp {
        self.edges[edge as usize].ts
    }

    /// Length of the prefix of an incidence list with timestamps strictly before `t`.
    pub(crate) fn prefix_before(&self, list: &[u32], t: Timestamp) -> usize {
        list.partition_point(|&e| self.ts_of(e) < t)
    }

    /// Number of edges with timestamp strictly before `t`.
    pub fn edges_before(&self, t: Timestamp) -> usize {
        self.edges.partition_point(|e| e.ts < t)
    }

    /// Chronological train/validation/test split; both boundaries are floored.
    pub fn chronological_split(&self, train_frac: f64, valid_frac: f64) -> Result<SplitView<'_>, StoreError> {
        let n = self.edges.len();
        if n < 3 {
            return Err(StoreError::TooFewEdges(n));
        }
        if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
            return Err(StoreError::InvalidFractions { train: train_frac, valid: valid_frac });
        }
        // the epsilon absorbs representation error such as 0.7 * 100 = 69.999...
        let floor = |x: f64| (x + 1e-9) as usize;
        let train_end = floor(train_frac * n as f64).min(n);
        let valid_end = floor((train_frac + valid_frac) * n as f64).clamp(train_end, n);
        Ok(SplitView { store: self, train_end, valid_end })
    }
}

/// Index boundaries of a chronological split over a store.
#[derive(Clone, Copy, Debug)]
pub struct SplitView<'a> {
    pub store: &'a DyTagStore,
    pub train_end: usize,
    pub valid_end: usize,
}

impl<'a> SplitView<'a> {
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn valid(&self) -> Range<usize> {
        self.train_end..self.valid_end
    }

    pub fn test(&self) -> Range<usize> {
        self.valid_end..self.store.num_edges()
    }

    /// Timestamp used as the strict-past cutoff for knowledge built from train+validation.
    pub fn history_cutoff(&self) -> Timestamp {
        match self.store.edges.get(self.valid_end) {
            Some(e) => e.ts,
            None => Timestamp(f64::MAX),
        }
    }

    /// The `sample_count` earliest test edges grouped into consecutive batches.
    ///
    /// Over-long requests are clamped to the test size; the last batch may be short.
    pub fn select_eval_window(&self, sample_count: usize, batch_size: usize) -> Vec<Range<usize>> {
        let test = self.test();
        let available = test.len();
        let count = if sample_count > available {
            log::warn!("eval window clamped from {} to {} test edges", sample_count, available);
            available
        } else {
            sample_count
        };
        let batch = batch_size.max(1);
        let start = test.start;
        (0..count).step_by(batch).map(|offset| start + offset..start + (offset + batch).min(count)).collect()
    }
}

/// The three-node toy graph shared by unit and integration tests.
///
/// | edge | src | dst | ts | label | text |
/// |------|-----|-----|----|-------|------|
/// | e1   | 1   | 2   | 1  | A     | 10   |
/// | e2   | 1   | 2   | 2  | A     | 11   |
/// | e3   | 1   | 3   | 3  | B     | 12   |
/// | e4   | 2   | 3   | 4  | A     | 13   |
/// | e5   | 1   | 2   | 5  | B     | 14   |
pub mod fixtures {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub fn toy_parts() -> StoreParts {
        let edge = |src: u64, dst: u64, ts: u64, label: u32, text: u64| TemporalEdge {
            src: NodeId(src),
            dst: NodeId(dst),
            ts: Timestamp::from_int(ts),
            label: LabelId(label),
            text_id: Some(TextId(text)),
        };
        StoreParts {
            edges: vec![edge(1, 2, 1, 0, 10), edge(1, 2, 2, 0, 11), edge(1, 3, 3, 1, 12), edge(2, 3, 4, 0, 13), edge(1, 2, 5, 1, 14)],
            node_texts: vec![(NodeId(1), "alice".to_string()), (NodeId(2), "bob".to_string()), (NodeId(3), "carol".to_string())],
            edge_texts: vec![
                (TextId(10), "lunch plans for friday".to_string()),
                (TextId(11), "budget review notes".to_string()),
                (TextId(12), "weekend trip photos".to_string()),
                (TextId(13), "status update on the deal".to_string()),
                (TextId(14), "party invitation".to_string()),
            ],
            labels: vec![(LabelId(0), "A".to_string()), (LabelId(1), "B".to_string())],
            bipartite: false,
        }
    }

    pub fn toy_store() -> DyTagStore {
        DyTagStore::from_parts(toy_parts()).expect("toy fixture is valid")
    }
}
