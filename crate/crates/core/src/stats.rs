//! Validation-split statistics consumed by the global summary agents.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{LabelId, NodeId, SplitView};
use crate::metrics::{EdgeLabelDistribution, EldScope, EvidenceCursor, MetricOptions, MetricsError, PairEvidence, PairQuery};
use crate::rng::SeededRng;

/// The numeric metrics that get distribution dictionaries and thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StructMetric {
    #[serde(rename = "HI")]
    Hi,
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "DNF")]
    Dnf,
}

impl StructMetric {
    pub const ALL: [StructMetric; 3] = [StructMetric::Hi, StructMetric::Cn, StructMetric::Dnf];

    pub fn value(self, ev: &PairEvidence) -> u64 {
        match self {
            StructMetric::Hi => ev.hi,
            StructMetric::Cn => ev.cn,
            StructMetric::Dnf => ev.dnf(),
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            StructMetric::Hi => "HI",
            StructMetric::Cn => "CN",
            StructMetric::Dnf => "DNF",
        }
    }

    pub fn long(self) -> &'static str {
        match self {
            StructMetric::Hi => "Historical interaction count",
            StructMetric::Cn => "Common neighbors",
            StructMetric::Dnf => "Destination Node Frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HI" => Some(StructMetric::Hi),
            "CN" => Some(StructMetric::Cn),
            "DNF" => Some(StructMetric::Dnf),
            _ => None,
        }
    }
}

impl fmt::Display for StructMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// The fixed bucket conditions, in order.
pub const BUCKET_KEYS: [&str; 7] = ["=0", ">0", ">1", ">2", ">3", ">4", ">5"];

/// Proportion of samples meeting each bucket condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionDict {
    pub metric: StructMetric,
    pub polarity: Polarity,
    pub buckets: BTreeMap<String, f64>,
}

impl DistributionDict {
    pub fn from_values(metric: StructMetric, polarity: Polarity, values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let frac = |pred: &dyn Fn(u64) -> bool| values.iter().filter(|&&v| pred(v)).count() as f64 / n;
        let mut buckets = BTreeMap::new();
        buckets.insert(BUCKET_KEYS[0].to_string(), frac(&|v| v == 0));
        for k in 0..=5u64 {
            buckets.insert(BUCKET_KEYS[k as usize + 1].to_string(), frac(&|v| v > k));
        }
        Some(DistributionDict { metric, polarity, buckets })
    }

    pub fn get(&self, key: &str) -> f64 {
        self.buckets.get(key).copied().unwrap_or(0.0)
    }

    /// `{"=0": 0.25, ">0": 0.75, ...}` in bucket order, values to four decimals.
    pub fn render(&self) -> String {
        let parts: Vec<String> =
            BUCKET_KEYS.iter().map(|k| alloc::format!("\"{}{}\": {:.4}", self.metric.short(), k, self.get(k))).collect();
        alloc::format!("{{{}}}", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no {0:?} samples for {1} distribution")]
    MissingPolarity(Polarity, StructMetric),
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("only one eligible destination exists; cannot draw a distinct negative for {0}")]
    NoNegativeCandidate(NodeId),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Positive and negative distribution dictionaries for one metric.
pub fn metric_distribution(
    samples: &[(PairEvidence, Polarity)],
    metric: StructMetric,
) -> Result<(DistributionDict, DistributionDict), StatsError> {
    let values = |p: Polarity| -> Vec<u64> { samples.iter().filter(|(_, q)| *q == p).map(|(ev, _)| metric.value(ev)).collect() };
    let pos = DistributionDict::from_values(metric, Polarity::Positive, &values(Polarity::Positive))
        .ok_or(StatsError::MissingPolarity(Polarity::Positive, metric))?;
    let neg = DistributionDict::from_values(metric, Polarity::Negative, &values(Polarity::Negative))
        .ok_or(StatsError::MissingPolarity(Polarity::Negative, metric))?;
    Ok((pos, neg))
}

/// How often the true label held each historical frequency rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDict {
    pub scope: EldScope,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub others: f64,
    pub counted_samples: u64,
}

impl PreferenceDict {
    pub fn render(&self) -> String {
        alloc::format!(
            "{{\"top1\": {:.2}%, \"top2\": {:.2}%, \"top3\": {:.2}%, \"others\": {:.2}%}} (counted samples: {})",
            self.top1,
            self.top2,
            self.top3,
            self.others,
            self.counted_samples
        )
    }
}

/// Builds the frequency-preference dictionary; empty histories are skipped.
pub fn eld_preference(samples: &[(EdgeLabelDistribution, LabelId)], scope: EldScope) -> PreferenceDict {
    let mut counts = [0u64; 4];
    for (history, truth) in samples {
        if history.is_empty() {
            continue;
        }
        let rank = history.ranked().iter().position(|(l, _)| l == truth);
        let slot = match rank {
            Some(r) if r < 3 => r,
            _ => 3,
        };
        counts[slot] += 1;
    }
    let counted: u64 = counts.iter().sum();
    let pct = |c: u64| if counted == 0 { 0.0 } else { c as f64 * 100.0 / counted as f64 };
    PreferenceDict {
        scope,
        top1: pct(counts[0]),
        top2: pct(counts[1]),
        top3: pct(counts[2]),
        others: pct(counts[3]),
        counted_samples: counted,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub src_text: String,
    pub dst_text: String,
    pub edge_text: String,
    pub label_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSampleSet {
    pub samples: Vec<TextSample>,
    pub count: usize,
    pub truncation: usize,
}

/// First `limit` characters of `text`.
pub fn truncate_chars(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        Some((cut, _)) => text[..cut].to_string(),
        None => text.to_string(),
    }
}

/// Validation edge offsets spaced uniformly: `floor(i * n / count)`.
pub fn uniform_offsets(n: usize, count: usize) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    (0..count).map(|i| i * n / count).collect()
}

/// Time-uniform validation text samples with every field truncated.
pub fn sample_texts(split: &SplitView<'_>, count: usize, truncation: usize) -> Result<TextSampleSet, StatsError> {
    let valid = split.valid();
    if valid.is_empty() {
        return Err(StatsError::EmptyValidation);
    }
    if valid.len() < count {
        log::warn!("text sampling clamped from {} to {} validation edges", count, valid.len());
    }
    let store = split.store;
    let samples: Vec<TextSample> = uniform_offsets(valid.len(), count)
        .into_iter()
        .map(|off| {
            let idx = valid.start + off;
            let e = store.edge(idx);
            TextSample {
                src_text: truncate_chars(store.node_text(e.src).unwrap_or_default(), truncation),
                dst_text: truncate_chars(store.node_text(e.dst).unwrap_or_default(), truncation),
                edge_text: truncate_chars(store.edge_text_of(idx).unwrap_or_default(), truncation),
                label_text: truncate_chars(store.label_text(e.label).unwrap_or_default(), truncation),
            }
        })
        .collect();
    Ok(TextSampleSet { count: samples.len(), samples, truncation })
}

/// Candidate destinations for negatives: the destination partition on
/// bipartite stores, every registered node otherwise.
pub fn eligible_destinations(split: &SplitView<'_>) -> Vec<NodeId> {
    if split.store.is_bipartite() {
        split.store.destination_partition()
    } else {
        split.store.node_ids().to_vec()
    }
}

/// Uniform draw from `eligible` excluding `exclude`.
pub fn draw_negative(rng: &mut SeededRng, eligible: &[NodeId], exclude: NodeId) -> Option<NodeId> {
    let excluded_at = eligible.binary_search(&exclude).ok();
    let usable = eligible.len() - usize::from(excluded_at.is_some());
    if usable == 0 {
        return None;
    }
    let mut i = rng.below(usable as u64) as usize;
    if let Some(x) = excluded_at {
        if i >= x {
            i += 1;
        }
    }
    Some(eligible[i])
}

/// One negative per validation positive: same source and time, random destination.
pub fn build_negative_validation_samples(split: &SplitView<'_>, seed: u64) -> Result<Vec<PairQuery>, StatsError> {
    let valid = split.valid();
    if valid.is_empty() {
        return Err(StatsError::EmptyValidation);
    }
    let eligible = eligible_destinations(split);
    let mut rng = SeededRng::derive(seed, 0x6e65_67);
    valid
        .map(|i| {
            let e = split.store.edge(i);
            draw_negative(&mut rng, &eligible, e.dst)
                .map(|dst| PairQuery::new(e.src, dst, e.ts))
                .ok_or(StatsError::NoNegativeCandidate(e.src))
        })
        .collect()
}

/// Node texts of positive and negative validation pairs, for the text-link agent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTextSamples {
    pub positive: Vec<(String, String)>,
    pub negative: Vec<(String, String)>,
}

/// Everything the global summary agents are shown, computed once per split and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    /// (positive, negative) per metric, in HI, CN, DNF order.
    pub distributions: Vec<(DistributionDict, DistributionDict)>,
    /// Source, destination and pair preference dictionaries.
    pub preferences: Vec<PreferenceDict>,
    pub text_samples: TextSampleSet,
    pub link_texts: LinkTextSamples,
    pub negatives: Vec<PairQuery>,
}

impl GlobalStats {
    pub fn distribution(&self, metric: StructMetric) -> &(DistributionDict, DistributionDict) {
        &self.distributions[StructMetric::ALL.iter().position(|m| *m == metric).unwrap_or(0)]
    }

    pub fn preference(&self, scope: EldScope) -> &PreferenceDict {
        let i = match scope {
            EldScope::Source => 0,
            EldScope::Destination => 1,
            EldScope::Pair => 2,
        };
        &self.preferences[i]
    }
}

/// Distribution dictionaries, preference dictionaries and text samples over
/// the validation split, with one seeded negative per positive.
pub fn prepare_global_stats(
    split: &SplitView<'_>,
    seed: u64,
    text_count: usize,
    truncation: usize,
    opts: MetricOptions,
) -> Result<GlobalStats, StatsError> {
    let store = split.store;
    let negatives = build_negative_validation_samples(split, seed)?;
    let mut cursor = EvidenceCursor::new(store, opts);
    let mut labelled: Vec<(PairEvidence, Polarity)> = Vec::with_capacity(2 * negatives.len());
    let mut eld_samples: [Vec<(EdgeLabelDistribution, LabelId)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, neg) in split.valid().zip(&negatives) {
        let e = store.edge(idx);
        cursor.advance_to(e.ts)?;
        let pos = cursor.evidence(e.src, e.dst, false);
        eld_samples[0].push((pos.eld_src.clone(), e.label));
        eld_samples[1].push((pos.eld_dst.clone(), e.label));
        eld_samples[2].push((pos.eld_pair.clone(), e.label));
        labelled.push((pos, Polarity::Positive));
        labelled.push((cursor.evidence(neg.src, neg.dst, false), Polarity::Negative));
    }
    let distributions = StructMetric::ALL.iter().map(|m| metric_distribution(&labelled, *m)).collect::<Result<Vec<_>, _>>()?;
    let [s, d, p] = eld_samples;
    let preferences =
        alloc::vec![eld_preference(&s, EldScope::Source), eld_preference(&d, EldScope::Destination), eld_preference(&p, EldScope::Pair),];
    let text_samples = sample_texts(split, text_count, truncation)?;
    let text = |n: NodeId| truncate_chars(store.node_text(n).unwrap_or_default(), truncation);
    let mut link_texts = LinkTextSamples::default();
    for off in uniform_offsets(negatives.len(), text_count) {
        let e = store.edge(split.valid().start + off);
        let neg = &negatives[off];
        link_texts.positive.push((text(e.src), text(e.dst)));
        link_texts.negative.push((text(neg.src), text(neg.dst)));
    }
    Ok(GlobalStats { distributions, preferences, text_samples, link_texts, negatives })
}
