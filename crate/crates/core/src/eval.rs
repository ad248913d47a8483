//! Scoring and dataset analyses.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::graph::{DyTagStore, LabelId, NodeId, SplitView};
use crate::knowledge::select_active_nodes;
use crate::predict::{Answer, PredictionRecord, PromptMode, Task, Truth};

pub const REPORT_VERSION: u32 = 1;
pub const HITS_AT: [usize; 3] = [1, 3, 10];
pub const DEFAULT_MIN_REPEATED: f64 = 0.10;

pub type Metrics = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no records to score")]
    Empty,
    #[error("record {index} does not hold a {task} answer with its truth")]
    Mismatch { index: usize, task: Task },
}

fn mismatch(r: &PredictionRecord, task: Task) -> EvalError {
    EvalError::Mismatch { index: r.query.index, task }
}

/// Accuracy over positives and paired negatives.
pub fn score_lp(records: &[PredictionRecord]) -> Result<Metrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut correct = 0usize;
    for r in records {
        match (&r.answer, r.query.truth) {
            (Answer::Link(a), Truth::Link(t)) => correct += usize::from(*a == t),
            _ => return Err(mismatch(r, Task::Lp)),
        }
    }
    let mut m = Metrics::new();
    m.insert("accuracy".into(), correct as f64 / records.len() as f64);
    Ok(m)
}

/// Hits@k from the recorded positive ranks.
pub fn hits_at(ranks: &[usize], ks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ks.iter().map(|&k| (format!("hits@{}", k), ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)).collect())
}

pub fn score_nr(records: &[PredictionRecord], ks: &[usize]) -> Result<Metrics, EvalError> {
    let ranks = records
        .iter()
        .map(|r| match &r.answer {
            Answer::Retrieval { positive_rank, .. } => Ok(*positive_rank),
            _ => Err(mismatch(r, Task::Nr)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    hits_at(&ranks, ks)
}

/// Support-weighted precision, recall and F1 over the true classes; a zero
/// denominator scores 0.
pub fn weighted_prf(pairs: &[(LabelId, LabelId)]) -> Result<Metrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut support: BTreeMap<LabelId, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<LabelId, usize> = BTreeMap::new();
    let mut hit: BTreeMap<LabelId, usize> = BTreeMap::new();
    for &(truth, pred) in pairs {
        *support.entry(truth).or_insert(0) += 1;
        *predicted.entry(pred).or_insert(0) += 1;
        if truth == pred {
            *hit.entry(truth).or_insert(0) += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (label, &s) in &support {
        let tp = hit.get(label).copied().unwrap_or(0);
        let pc = ratio(tp, predicted.get(label).copied().unwrap_or(0));
        let rc = ratio(tp, s);
        let fc = if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
        p += s as f64 * pc;
        r += s as f64 * rc;
        f += s as f64 * fc;
    }
    let n = pairs.len() as f64;
    let mut m = Metrics::new();
    m.insert("precision".into(), p / n);
    m.insert("recall".into(), r / n);
    m.insert("f1".into(), f / n);
    Ok(m)
}

pub fn score_ec(records: &[PredictionRecord]) -> Result<Metrics, EvalError> {
    let pairs = records
        .iter()
        .map(|r| match (&r.answer, r.query.truth) {
            (Answer::Label(p), Truth::Label(t)) => Ok((t, *p)),
            _ => Err(mismatch(r, Task::Ec)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    weighted_prf(&pairs)
}

pub fn score(task: Task, records: &[PredictionRecord]) -> Result<Metrics, EvalError> {
    match task {
        Task::Lp => score_lp(records),
        Task::Nr => score_nr(records, &HITS_AT),
        Task::Ec => score_ec(records),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub batch: usize,
    pub n_samples: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub task: Task,
    pub mode: PromptMode,
    pub dataset: String,
    pub n_samples: usize,
    pub fallback_count: usize,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_batch: Option<Vec<BatchScore>>,
    pub config_digest: String,
}

impl EvalReport {
    /// Scores `records`, all of which must come from one task and mode.
    pub fn build(
        task: Task,
        mode: PromptMode,
        dataset: &str,
        config_digest: &str,
        records: &[PredictionRecord],
        per_batch: bool,
    ) -> Result<EvalReport, EvalError> {
        let metrics = score(task, records)?;
        let per_batch = if per_batch {
            let mut groups: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
            for r in records {
                groups.entry(r.query.batch).or_default().push(r.clone());
            }
            Some(
                groups
                    .into_iter()
                    .map(|(batch, rs)| Ok(BatchScore { batch, n_samples: rs.len(), metrics: score(task, &rs)? }))
                    .collect::<Result<Vec<_>, EvalError>>()?,
            )
        } else {
            None
        };
        Ok(EvalReport {
            format_version: REPORT_VERSION,
            task,
            mode,
            dataset: dataset.to_owned(),
            n_samples: records.len(),
            fallback_count: records.iter().filter(|r| r.fallback_used).count(),
            metrics,
            per_batch,
            config_digest: config_digest.to_owned(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Plain-text table: one row per report, metrics as percentages.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    for r in reports {
        for k in r.metrics.keys() {
            if !columns.contains(&k.as_str()) {
                columns.push(k);
            }
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header: Vec<String> = ["dataset", "task", "mode", "n"].iter().map(|s| (*s).to_owned()).collect();
    header.extend(columns.iter().map(|c| (*c).to_owned()));
    rows.push(header);
    for r in reports {
        let mut row = alloc::vec![r.dataset.clone(), r.task.name().to_owned(), r.mode.name().to_owned(), format!("{}", r.n_samples)];
        for c in &columns {
            row.push(r.metrics.get(*c).map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into()));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{:<w$}", c, w = *w)).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// analyses

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    Pair,
    EdgeText,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOptions {
    pub min_fraction_repeated: f64,
    /// Group pairs by ordered (source, destination) instead of the unordered pair.
    pub directed: bool,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions { min_fraction_repeated: DEFAULT_MIN_REPEATED, directed: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupConsistency {
    pub grouping: Grouping,
    /// Absent when repeated groups hold too few of the interactions.
    pub consistency: Option<f64>,
    pub qualifying_groups: usize,
    pub repeated_interactions: usize,
    pub total_interactions: usize,
    pub repeated_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub directed: bool,
    pub min_fraction_repeated: f64,
    pub pair: GroupConsistency,
    pub text: GroupConsistency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey<'s> {
    Pair(NodeId, NodeId),
    Text(&'s str),
}

/// Share of interactions in repeated groups whose label equals the group's modal label.
pub fn group_consistency(store: &DyTagStore, edges: Range<usize>, grouping: Grouping, opts: ConsistencyOptions) -> GroupConsistency {
    // group -> label -> (count, first position)
    let mut groups: BTreeMap<GroupKey<'_>, BTreeMap<LabelId, (usize, usize)>> = BTreeMap::new();
    let mut total = 0usize;
    for i in edges {
        let e = store.edge(i);
        let key = match grouping {
            Grouping::Pair if opts.directed || e.src <= e.dst => GroupKey::Pair(e.src, e.dst),
            Grouping::Pair => GroupKey::Pair(e.dst, e.src),
            Grouping::EdgeText => match store.edge_text_of(i) {
                Some(t) => GroupKey::Text(t),
                None => continue,
            },
        };
        total += 1;
        groups.entry(key).or_default().entry(e.label).or_insert((0, i)).0 += 1;
    }
    let (mut qualifying, mut repeated, mut matches) = (0usize, 0usize, 0usize);
    for labels in groups.values() {
        let size: usize = labels.values().map(|c| c.0).sum();
        if size < 2 {
            continue;
        }
        qualifying += 1;
        repeated += size;
        let modal = labels.values().max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1))).map(|c| c.0).unwrap_or(0);
        matches += modal;
    }
    let repeated_fraction = if total == 0 { 0.0 } else { repeated as f64 / total as f64 };
    let consistency =
        if repeated == 0 || repeated_fraction < opts.min_fraction_repeated { None } else { Some(matches as f64 / repeated as f64) };
    GroupConsistency {
        grouping,
        consistency,
        qualifying_groups: qualifying,
        repeated_interactions: repeated,
        total_interactions: total,
        repeated_fraction,
    }
}

pub fn label_consistency(store: &DyTagStore, edges: Range<usize>, opts: ConsistencyOptions) -> ConsistencyReport {
    ConsistencyReport {
        directed: opts.directed,
        min_fraction_repeated: opts.min_fraction_repeated,
        pair: group_consistency(store, edges.clone(), Grouping::Pair, opts),
        text: group_consistency(store, edges, Grouping::EdgeText, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub fraction: f64,
    pub selected_nodes: usize,
    pub active_nodes: usize,
    pub coverage_all: f64,
    pub coverage_test: f64,
}

/// Share of interactions touching the most active train+validation nodes.
pub fn pareto_coverage(split: &SplitView<'_>, fraction: f64) -> ParetoReport {
    let store = split.store;
    let selected: BTreeSet<NodeId> = select_active_nodes(split, fraction).into_iter().collect();
    let active: BTreeSet<NodeId> = store.edges()[..split.valid_end].iter().flat_map(|e| [e.src, e.dst]).collect();
    let covered = |r: Range<usize>| -> f64 {
        if r.is_empty() {
            return 0.0;
        }
        let n = r.len();
        let hit = r.filter(|&i| {
            let e = store.edge(i);
            selected.contains(&e.src) || selected.contains(&e.dst)
        });
        hit.count() as f64 / n as f64
    };
    ParetoReport {
        fraction,
        selected_nodes: selected.len(),
        active_nodes: active.len(),
        coverage_all: covered(0..store.num_edges()),
        coverage_test: covered(split.test()),
    }
}
