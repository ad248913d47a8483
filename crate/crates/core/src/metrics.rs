//! Strict-past structural metrics for (source, destination, time) queries.
//!
//! Two routes compute the same values: direct functions that binary-search
//! the store's incidence lists, and [`EvidenceCursor`], a forward-only fold
//! over the edge stream that amortizes work across a chronologically sorted
//! batch. Edges at exactly the query time are never counted.
//!
//! Self-loops contribute one incidence as source and one as destination, so
//! a node's frequency and its label distribution both count them twice,
//! while pair-scoped counts see them once.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{DyTagStore, LabelId, NodeId, Timestamp};

/// Neighbor-set and pair semantics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Interactions in either direction count (the default).
    #[default]
    Undirected,
    /// Only source → destination interactions count; kept for sensitivity checks.
    Directed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairQuery {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: Timestamp,
}

impl PairQuery {
    pub fn new(src: NodeId, dst: NodeId, t: Timestamp) -> Self {
        PairQuery { src, dst, t }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeActivity {
    pub frequency: u64,
    pub times_as_source: u64,
    pub times_as_destination: u64,
    /// Mean total frequency of the node's distinct historical neighbors.
    pub avg_neighbor_frequency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EldScope {
    Source,
    Destination,
    Pair,
}

impl EldScope {
    pub fn name(self) -> &'static str {
        match self {
            EldScope::Source => "source",
            EldScope::Destination => "destination",
            EldScope::Pair => "pair",
        }
    }
}

/// Label histogram over qualifying historical edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLabelDistribution {
    pub scope: EldScope,
    pub cutoff: Timestamp,
    pub counts: BTreeMap<LabelId, u64>,
    /// Stream position of each label's first qualifying edge; orders ties.
    #[serde(skip)]
    pub first_seen: BTreeMap<LabelId, u64>,
}

impl EdgeLabelDistribution {
    pub fn empty(scope: EldScope, cutoff: Timestamp) -> Self {
        EdgeLabelDistribution { scope, cutoff, counts: BTreeMap::new(), first_seen: BTreeMap::new() }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Labels by descending count; ties go to the label seen first.
    pub fn ranked(&self) -> Vec<(LabelId, u64)> {
        let mut out: Vec<(LabelId, u64)> = self.counts.iter().map(|(l, c)| (*l, *c)).collect();
        out.sort_by(|a, b| {
            b.1.cmp(&a.1).then_with(|| {
                let fa = self.first_seen.get(&a.0).copied().unwrap_or(u64::MAX);
                let fb = self.first_seen.get(&b.0).copied().unwrap_or(u64::MAX);
                fa.cmp(&fb).then(a.0.cmp(&b.0))
            })
        });
        out
    }

    pub fn modal(&self) -> Option<LabelId> {
        self.ranked().first().map(|(l, _)| *l)
    }

    fn add(&mut self, label: LabelId, position: u64) {
        *self.counts.entry(label).or_insert(0) += 1;
        let first = self.first_seen.entry(label).or_insert(position);
        *first = (*first).min(position);
    }
}

/// Everything extracted for one (source, destination, time) query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvidence {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: Timestamp,
    pub hi: u64,
    pub cn: u64,
    pub src_activity: NodeActivity,
    pub dst_activity: NodeActivity,
    pub eld_src: EdgeLabelDistribution,
    pub eld_dst: EdgeLabelDistribution,
    pub eld_pair: EdgeLabelDistribution,
    pub src_text: String,
    pub dst_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_text: Option<String>,
}

impl PairEvidence {
    /// Destination node frequency.
    pub fn dnf(&self) -> u64 {
        self.dst_activity.frequency
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("query {index} at t={t} precedes the previous query at t={previous}")]
    Unsorted { index: usize, t: Timestamp, previous: Timestamp },
}

// ---------------------------------------------------------------------------
// direct route

pub(crate) fn neighbor_indices(store: &DyTagStore, node: u32, t: Timestamp, direction: Direction) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    let outs = store.out_list(node);
    for &e in &outs[..store.prefix_before(outs, t)] {
        out.insert(store.dense_dst(e));
    }
    if direction == Direction::Undirected {
        let ins = store.in_list(node);
        for &e in &ins[..store.prefix_before(ins, t)] {
            out.insert(store.dense_src(e));
        }
    }
    out
}

fn frequency_dense(store: &DyTagStore, node: u32, t: Timestamp) -> (u64, u64) {
    let outs = store.out_list(node);
    let ins = store.in_list(node);
    (store.prefix_before(outs, t) as u64, store.prefix_before(ins, t) as u64)
}

/// Number of edges between `u` and `v` strictly before `t`.
pub fn historical_interaction_count(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp) -> u64 {
    historical_interaction_count_with(store, u, v, t, MetricOptions::default())
}

pub fn historical_interaction_count_with(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp, opts: MetricOptions) -> u64 {
    match (store.node_index(u), store.node_index(v)) {
        (Some(a), Some(b)) => pair_edges(store, a, b, t, opts.direction).len() as u64,
        _ => 0,
    }
}

/// Edge positions between dense nodes `a` and `b` before `t`, in stream order.
fn pair_edges(store: &DyTagStore, a: u32, b: u32, t: Timestamp, direction: Direction) -> Vec<u32> {
    let outs = store.out_list(a);
    let mut edges: Vec<u32> = outs[..store.prefix_before(outs, t)].iter().copied().filter(|&e| store.dense_dst(e) == b).collect();
    if direction == Direction::Undirected && a != b {
        let ins = store.in_list(a);
        edges.extend(ins[..store.prefix_before(ins, t)].iter().copied().filter(|&e| store.dense_src(e) == b));
        edges.sort_unstable();
    }
    edges
}

/// |N_t(u) ∩ N_t(v)|.
pub fn common_neighbor_count(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp) -> u64 {
    common_neighbor_count_with(store, u, v, t, MetricOptions::default())
}

pub fn common_neighbor_count_with(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp, opts: MetricOptions) -> u64 {
    match (store.node_index(u), store.node_index(v)) {
        (Some(a), Some(b)) => {
            let na = neighbor_indices(store, a, t, opts.direction);
            let nb = neighbor_indices(store, b, t, opts.direction);
            na.intersection(&nb).count() as u64
        }
        _ => 0,
    }
}

pub fn node_activity(store: &DyTagStore, n: NodeId, t: Timestamp) -> NodeActivity {
    node_activity_with(store, n, t, MetricOptions::default())
}

pub fn node_activity_with(store: &DyTagStore, n: NodeId, t: Timestamp, opts: MetricOptions) -> NodeActivity {
    let Some(i) = store.node_index(n) else {
        return NodeActivity::default();
    };
    let (as_src, as_dst) = frequency_dense(store, i, t);
    let neighbors = neighbor_indices(store, i, t, opts.direction);
    let avg = if neighbors.is_empty() {
        0.0
    } else {
        let total: u64 = neighbors
            .iter()
            .map(|&m| {
                let (s, d) = frequency_dense(store, m, t);
                s + d
            })
            .sum();
        total as f64 / neighbors.len() as f64
    };
    NodeActivity { frequency: as_src + as_dst, times_as_source: as_src, times_as_destination: as_dst, avg_neighbor_frequency: avg }
}

/// Label histogram of a node's incident edges before `t`.
pub fn node_label_distribution(store: &DyTagStore, n: NodeId, scope: EldScope, t: Timestamp) -> EdgeLabelDistribution {
    let mut eld = EdgeLabelDistribution::empty(scope, t);
    if let Some(i) = store.node_index(n) {
        let outs = store.out_list(i);
        let ins = store.in_list(i);
        for &e in outs[..store.prefix_before(outs, t)].iter().chain(&ins[..store.prefix_before(ins, t)]) {
            eld.add(store.label_at(store.dense_label(e)), e as u64);
        }
    }
    eld
}

/// Label histogram of the edges between `u` and `v` before `t`.
pub fn pair_label_distribution(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp, opts: MetricOptions) -> EdgeLabelDistribution {
    let mut eld = EdgeLabelDistribution::empty(EldScope::Pair, t);
    if let (Some(a), Some(b)) = (store.node_index(u), store.node_index(v)) {
        for e in pair_edges(store, a, b, t, opts.direction) {
            eld.add(store.label_at(store.dense_label(e)), e as u64);
        }
    }
    eld
}

/// Text of the edge u → v at exactly `t`, if such an edge exists.
pub fn target_edge_text(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp) -> Option<String> {
    let a = store.node_index(u)?;
    let b = store.node_index(v)?;
    let outs = store.out_list(a);
    let start = store.prefix_before(outs, t);
    outs[start..]
        .iter()
        .take_while(|&&e| store.ts_of(e) == t)
        .find(|&&e| store.dense_dst(e) == b)
        .and_then(|&e| store.edge_text_of(e as usize))
        .map(ToString::to_string)
}

pub fn pair_evidence(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp, include_edge_text: bool) -> PairEvidence {
    pair_evidence_with(store, u, v, t, include_edge_text, MetricOptions::default())
}

pub fn pair_evidence_with(
    store: &DyTagStore,
    u: NodeId,
    v: NodeId,
    t: Timestamp,
    include_edge_text: bool,
    opts: MetricOptions,
) -> PairEvidence {
    PairEvidence {
        src: u,
        dst: v,
        t,
        hi: historical_interaction_count_with(store, u, v, t, opts),
        cn: common_neighbor_count_with(store, u, v, t, opts),
        src_activity: node_activity_with(store, u, t, opts),
        dst_activity: node_activity_with(store, v, t, opts),
        eld_src: node_label_distribution(store, u, EldScope::Source, t),
        eld_dst: node_label_distribution(store, v, EldScope::Destination, t),
        eld_pair: pair_label_distribution(store, u, v, t, opts),
        src_text: store.node_text(u).unwrap_or_default().to_string(),
        dst_text: store.node_text(v).unwrap_or_default().to_string(),
        edge_text: if include_edge_text { target_edge_text(store, u, v, t) } else { None },
    }
}

// ---------------------------------------------------------------------------
// incremental route

#[derive(Clone, Debug, Default)]
struct LabelCounter {
    // dense label -> (count, first position)
    counts: BTreeMap<u32, (u64, u64)>,
}

impl LabelCounter {
    fn add(&mut self, label: u32, position: u64) {
        let entry = self.counts.entry(label).or_insert((0, position));
        entry.0 += 1;
    }

    fn to_distribution(&self, store: &DyTagStore, scope: EldScope, cutoff: Timestamp) -> EdgeLabelDistribution {
        let mut eld = EdgeLabelDistribution::empty(scope, cutoff);
        for (&l, &(count, first)) in &self.counts {
            let id = store.label_at(l);
            eld.counts.insert(id, count);
            eld.first_seen.insert(id, first);
        }
        eld
    }
}

/// Forward-only cursor that folds edges into running indexes.
///
/// Queries must arrive in non-decreasing time order; each answer equals the
/// direct route at the same `(u, v, t)`.
#[derive(Clone, Debug)]
pub struct EvidenceCursor<'a> {
    store: &'a DyTagStore,
    opts: MetricOptions,
    folded: usize,
    cutoff: Timestamp,
    as_source: Vec<u64>,
    as_destination: Vec<u64>,
    neighbors: Vec<BTreeSet<u32>>,
    pair_counts: BTreeMap<(u32, u32), u64>,
    node_labels: Vec<LabelCounter>,
    pair_labels: BTreeMap<(u32, u32), LabelCounter>,
}

impl<'a> EvidenceCursor<'a> {
    pub fn new(store: &'a DyTagStore, opts: MetricOptions) -> Self {
        let n = store.num_nodes();
        EvidenceCursor {
            store,
            opts,
            folded: 0,
            cutoff: Timestamp::ZERO,
            as_source: alloc::vec![0; n],
            as_destination: alloc::vec![0; n],
            neighbors: alloc::vec![BTreeSet::new(); n],
            pair_counts: BTreeMap::new(),
            node_labels: alloc::vec![LabelCounter::default(); n],
            pair_labels: BTreeMap::new(),
        }
    }

    pub fn cutoff(&self) -> Timestamp {
        self.cutoff
    }

    fn pair_key(&self, a: u32, b: u32) -> (u32, u32) {
        match self.opts.direction {
            Direction::Undirected if a > b => (b, a),
            _ => (a, b),
        }
    }

    /// Folds every edge with timestamp strictly before `t`.
    pub fn advance_to(&mut self, t: Timestamp) -> Result<(), MetricsError> {
        if t < self.cutoff {
            return Err(MetricsError::Unsorted { index: 0, t, previous: self.cutoff });
        }
        self.cutoff = t;
        let edges = self.store.edges();
        while self.folded < edges.len() && edges[self.folded].ts < t {
            let e = self.folded as u32;
            let s = self.store.dense_src(e);
            let d = self.store.dense_dst(e);
            let l = self.store.dense_label(e);
            self.as_source[s as usize] += 1;
            self.as_destination[d as usize] += 1;
            self.neighbors[s as usize].insert(d);
            if self.opts.direction == Direction::Undirected {
                self.neighbors[d as usize].insert(s);
            }
            let key = self.pair_key(s, d);
            *self.pair_counts.entry(key).or_insert(0) += 1;
            self.pair_labels.entry(key).or_default().add(l, e as u64);
            self.node_labels[s as usize].add(l, e as u64);
            self.node_labels[d as usize].add(l, e as u64);
            self.folded += 1;
        }
        Ok(())
    }

    fn frequency(&self, node: u32) -> u64 {
        self.as_source[node as usize] + self.as_destination[node as usize]
    }

    fn activity(&self, node: Option<u32>) -> NodeActivity {
        let Some(n) = node else {
            return NodeActivity::default();
        };
        let neighbors = &self.neighbors[n as usize];
        let avg = if neighbors.is_empty() {
            0.0
        } else {
            neighbors.iter().map(|&m| self.frequency(m)).sum::<u64>() as f64 / neighbors.len() as f64
        };
        NodeActivity {
            frequency: self.frequency(n),
            times_as_source: self.as_source[n as usize],
            times_as_destination: self.as_destination[n as usize],
            avg_neighbor_frequency: avg,
        }
    }

    fn common(&self, a: u32, b: u32) -> u64 {
        let (small, large) = {
            let na = &self.neighbors[a as usize];
            let nb = &self.neighbors[b as usize];
            if na.len() <= nb.len() {
                (na, nb)
            } else {
                (nb, na)
            }
        };
        small.iter().filter(|m| large.contains(m)).count() as u64
    }

    /// Evidence at the current cutoff.
    pub fn evidence(&self, u: NodeId, v: NodeId, include_edge_text: bool) -> PairEvidence {
        let t = self.cutoff;
        let a = self.store.node_index(u);
        let b = self.store.node_index(v);
        let (hi, cn, eld_pair) = match (a, b) {
            (Some(a), Some(b)) => {
                let key = self.pair_key(a, b);
                let eld = self
                    .pair_labels
                    .get(&key)
                    .map(|c| c.to_distribution(self.store, EldScope::Pair, t))
                    .unwrap_or_else(|| EdgeLabelDistribution::empty(EldScope::Pair, t));
                (self.pair_counts.get(&key).copied().unwrap_or(0), self.common(a, b), eld)
            }
            _ => (0, 0, EdgeLabelDistribution::empty(EldScope::Pair, t)),
        };
        let node_eld = |n: Option<u32>, scope| match n {
            Some(n) => self.node_labels[n as usize].to_distribution(self.store, scope, t),
            None => EdgeLabelDistribution::empty(scope, t),
        };
        PairEvidence {
            src: u,
            dst: v,
            t,
            hi,
            cn,
            src_activity: self.activity(a),
            dst_activity: self.activity(b),
            eld_src: node_eld(a, EldScope::Source),
            eld_dst: node_eld(b, EldScope::Destination),
            eld_pair,
            src_text: self.store.node_text(u).unwrap_or_default().to_string(),
            dst_text: self.store.node_text(v).unwrap_or_default().to_string(),
            edge_text: if include_edge_text { target_edge_text(self.store, u, v, t) } else { None },
        }
    }

    /// Advances to `query.t` and returns its evidence.
    pub fn query(&mut self, query: &PairQuery, include_edge_text: bool) -> Result<PairEvidence, MetricsError> {
        self.advance_to(query.t)?;
        Ok(self.evidence(query.src, query.dst, include_edge_text))
    }
}

/// Evidence for chronologically sorted queries via one cursor pass.
pub fn batch_evidence(
    store: &DyTagStore,
    queries: &[PairQuery],
    include_edge_text: bool,
    opts: MetricOptions,
) -> Result<Vec<PairEvidence>, MetricsError> {
    if let Some(i) = (1..queries.len()).find(|&i| queries[i].t < queries[i - 1].t) {
        return Err(MetricsError::Unsorted { index: i, t: queries[i].t, previous: queries[i - 1].t });
    }
    let mut cursor = EvidenceCursor::new(store, opts);
    queries.iter().map(|q| cursor.query(q, include_edge_text)).collect()
}
