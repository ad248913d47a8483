//! Candidate recall and ranking for node retrieval.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, Timestamp};
use crate::knowledge::{Clause, Combinator, Comparator, Favors, GlobalLinkKnowledge, Level, ThresholdRule};
use crate::metrics::PairEvidence;
use crate::stats::StructMetric;

pub const DEFAULT_CAP: usize = 20;

/// The rule behind default recall: drop pairs with neither history nor common neighbors.
pub fn default_rule() -> ThresholdRule {
    ThresholdRule {
        clauses: alloc::vec![
            Clause { metric: StructMetric::Hi, op: Comparator::Lt, value: 1.0 },
            Clause { metric: StructMetric::Cn, op: Comparator::Lt, value: 1.0 },
        ],
        combinator: Combinator::And,
        action: Default::default(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub node: NodeId,
    pub rule: ThresholdRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub source: NodeId,
    pub t: Timestamp,
    pub candidates: Vec<PairEvidence>,
    pub excluded: Vec<Exclusion>,
    pub cap: usize,
}

impl CandidateSet {
    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.candidates.iter().position(|c| c.dst == node)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.candidates.iter().map(|c| c.dst).collect()
    }
}

/// Keeps pool members matching no rule; each dropped member records the first rule it matched.
pub fn apply_thresholds(source: NodeId, t: Timestamp, pool: Vec<PairEvidence>, rules: &[ThresholdRule]) -> CandidateSet {
    let fallback;
    let rules = if rules.is_empty() {
        fallback = [default_rule()];
        &fallback[..]
    } else {
        rules
    };
    let mut candidates = Vec::with_capacity(pool.len());
    let mut excluded = Vec::new();
    for ev in pool {
        match rules.iter().find(|r| r.matches(&ev)) {
            Some(r) => excluded.push(Exclusion { node: ev.dst, rule: r.clone() }),
            None => candidates.push(ev),
        }
    }
    CandidateSet { source, t, candidates, excluded, cap: DEFAULT_CAP }
}

/// Keeps candidates with HI > 0 or CN > 0.
pub fn default_recall(source: NodeId, t: Timestamp, pool: Vec<PairEvidence>) -> CandidateSet {
    apply_thresholds(source, t, pool, &[])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortKey {
    pub metric: StructMetric,
    pub descending: bool,
}

/// HI then CN, both descending: the order used outside GAD mode.
pub const STRUCTURAL_KEYS: [SortKey; 2] =
    [SortKey { metric: StructMetric::Hi, descending: true }, SortKey { metric: StructMetric::Cn, descending: true }];

/// Favored metrics by significance level (HI, CN, DNF within a level);
/// irrelevant metrics and metrics without a direction are skipped.
pub fn ranking_keys(k: &GlobalLinkKnowledge) -> Vec<SortKey> {
    let mut keyed: Vec<(Level, usize, SortKey)> = StructMetric::ALL
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let mk = k.metric(*m);
            if mk.significance == Level::NotRelevant {
                return None;
            }
            let descending = match mk.favors {
                Favors::High => true,
                Favors::Low => false,
                Favors::None => return None,
            };
            Some((mk.significance, i, SortKey { metric: *m, descending }))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let keys: Vec<SortKey> = keyed.into_iter().map(|(_, _, k)| k).collect();
    if keys.is_empty() {
        log::warn!("no usable ranking metric in knowledge; ranking by HI descending");
        return alloc::vec![STRUCTURAL_KEYS[0]];
    }
    keys
}

/// Metric tuple comparison, then node id ascending; a total order.
pub fn compare(a: &PairEvidence, b: &PairEvidence, keys: &[SortKey]) -> Ordering {
    for k in keys {
        let (x, y) = (k.metric.value(a), k.metric.value(b));
        let o = if k.descending { y.cmp(&x) } else { x.cmp(&y) };
        if o != Ordering::Equal {
            return o;
        }
    }
    a.dst.cmp(&b.dst)
}

/// Sorts by `keys` and truncates to the cap.
pub fn rank_candidates(mut set: CandidateSet, keys: &[SortKey]) -> CandidateSet {
    set.candidates.sort_by(|a, b| compare(a, b, keys));
    set.candidates.truncate(set.cap);
    set
}
