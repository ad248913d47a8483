//! Brute-force oracles shared by the core integration tests and the
//! acceptance runner. Everything here scans the raw edge list; nothing reuses
//! the library's indexes.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dytag_core::eval::{hits_at, weighted_prf};
use dytag_core::knowledge::{Clause, Combinator, Comparator, ThresholdRule};
use dytag_core::metrics::{self, batch_evidence, pair_evidence_with};
use dytag_core::recall::{apply_thresholds, compare, rank_candidates, SortKey, DEFAULT_CAP};
use dytag_core::rng::SeededRng;
use dytag_core::stats::{eld_preference, DistributionDict, Polarity, StructMetric, BUCKET_KEYS};
use dytag_core::synth::{bipartite_dytag, random_small};
use dytag_core::{
    Direction, DyTagStore, EdgeLabelDistribution, EldScope, LabelId, MetricOptions, NodeActivity, NodeId, PairEvidence, PairQuery,
    TemporalEdge, Timestamp,
};

// ---------------------------------------------------------------------------
// metric oracle

fn before(edges: &[TemporalEdge], t: Timestamp) -> impl Iterator<Item = (usize, &TemporalEdge)> {
    edges.iter().enumerate().filter(move |(_, e)| e.ts < t)
}

fn in_pair(e: &TemporalEdge, u: NodeId, v: NodeId, dir: Direction) -> bool {
    (e.src == u && e.dst == v) || (dir == Direction::Undirected && e.src == v && e.dst == u)
}

pub fn scan_hi(edges: &[TemporalEdge], u: NodeId, v: NodeId, t: Timestamp, dir: Direction) -> u64 {
    before(edges, t).filter(|(_, e)| in_pair(e, u, v, dir)).count() as u64
}

pub fn scan_neighbors(edges: &[TemporalEdge], n: NodeId, t: Timestamp, dir: Direction) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for (_, e) in before(edges, t) {
        if e.src == n {
            out.insert(e.dst);
        }
        if dir == Direction::Undirected && e.dst == n {
            out.insert(e.src);
        }
    }
    out
}

pub fn scan_cn(edges: &[TemporalEdge], u: NodeId, v: NodeId, t: Timestamp, dir: Direction) -> u64 {
    scan_neighbors(edges, u, t, dir).intersection(&scan_neighbors(edges, v, t, dir)).count() as u64
}

fn scan_frequency(edges: &[TemporalEdge], n: NodeId, t: Timestamp) -> (u64, u64) {
    let s = before(edges, t).filter(|(_, e)| e.src == n).count() as u64;
    let d = before(edges, t).filter(|(_, e)| e.dst == n).count() as u64;
    (s, d)
}

pub fn scan_activity(edges: &[TemporalEdge], n: NodeId, t: Timestamp, dir: Direction) -> NodeActivity {
    let (s, d) = scan_frequency(edges, n, t);
    let nb = scan_neighbors(edges, n, t, dir);
    let avg = if nb.is_empty() {
        0.0
    } else {
        let total: u64 = nb
            .iter()
            .map(|&m| {
                let (a, b) = scan_frequency(edges, m, t);
                a + b
            })
            .sum();
        total as f64 / nb.len() as f64
    };
    NodeActivity { frequency: s + d, times_as_source: s, times_as_destination: d, avg_neighbor_frequency: avg }
}

fn scan_eld<'a>(scope: EldScope, t: Timestamp, hits: impl Iterator<Item = (usize, &'a TemporalEdge)>) -> EdgeLabelDistribution {
    let mut eld = EdgeLabelDistribution::empty(scope, t);
    for (i, e) in hits {
        *eld.counts.entry(e.label).or_insert(0) += 1;
        let f = eld.first_seen.entry(e.label).or_insert(i as u64);
        *f = (*f).min(i as u64);
    }
    eld
}

/// A self-loop is incident twice: once as source, once as destination.
pub fn scan_node_eld(edges: &[TemporalEdge], n: NodeId, scope: EldScope, t: Timestamp) -> EdgeLabelDistribution {
    let as_src = before(edges, t).filter(|(_, e)| e.src == n);
    let as_dst = before(edges, t).filter(|(_, e)| e.dst == n);
    scan_eld(scope, t, as_src.chain(as_dst))
}

pub fn scan_pair_eld(edges: &[TemporalEdge], u: NodeId, v: NodeId, t: Timestamp, dir: Direction) -> EdgeLabelDistribution {
    scan_eld(EldScope::Pair, t, before(edges, t).filter(|(_, e)| in_pair(e, u, v, dir)))
}

fn scan_edge_text(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp) -> Option<String> {
    let e = store.edges().iter().find(|e| e.src == u && e.dst == v && e.ts == t)?;
    e.text_id.and_then(|id| store.edge_text(id)).map(str::to_string)
}

pub fn scan_evidence(store: &DyTagStore, u: NodeId, v: NodeId, t: Timestamp, dir: Direction) -> PairEvidence {
    let edges = store.edges();
    PairEvidence {
        src: u,
        dst: v,
        t,
        hi: scan_hi(edges, u, v, t, dir),
        cn: scan_cn(edges, u, v, t, dir),
        src_activity: scan_activity(edges, u, t, dir),
        dst_activity: scan_activity(edges, v, t, dir),
        eld_src: scan_node_eld(edges, u, EldScope::Source, t),
        eld_dst: scan_node_eld(edges, v, EldScope::Destination, t),
        eld_pair: scan_pair_eld(edges, u, v, t, dir),
        src_text: store.node_text(u).unwrap_or_default().to_string(),
        dst_text: store.node_text(v).unwrap_or_default().to_string(),
        edge_text: scan_edge_text(store, u, v, t),
    }
}

fn describe(graph: usize, q: &PairQuery, route: &str, got: &PairEvidence, want: &PairEvidence) -> String {
    format!("graph {} query ({},{},{}) via {}: got {:?}, oracle {:?}", graph, q.src, q.dst, q.t, route, got, want)
}

/// Random graphs (up to 40 nodes, 200 edges, 6 labels), `queries` random
/// queries each, both directions, direct route and cursor route.
pub fn check_metric_oracle(graphs: usize, queries: usize, seed: u64) -> Result<usize, String> {
    let mut rng = SeededRng::new(seed);
    let mut checked = 0;
    for g in 0..graphs {
        let store = DyTagStore::from_parts(random_small(&mut rng, 40, 200, 6)).map_err(|e| e.to_string())?;
        let horizon = store.edges().last().map(|e| e.ts.value() as u64).unwrap_or(0) + 2;
        let n = store.num_nodes() as u64;
        let mut qs: Vec<PairQuery> = (0..queries)
            .map(|_| {
                // a node id one past the range exercises the unknown-node path
                let u = NodeId(rng.below(n + 1));
                let v = if rng.below(4) == 0 { u } else { NodeId(rng.below(n + 1)) };
                PairQuery::new(u, v, Timestamp::from_int(rng.below(horizon + 1)))
            })
            .collect();
        qs.sort_by_key(|q| q.t);
        for dir in [Direction::Undirected, Direction::Directed] {
            let opts = MetricOptions { direction: dir };
            let cursor = batch_evidence(&store, &qs, true, opts).map_err(|e| e.to_string())?;
            for (q, cur) in qs.iter().zip(&cursor) {
                let want = scan_evidence(&store, q.src, q.dst, q.t, dir);
                let direct = pair_evidence_with(&store, q.src, q.dst, q.t, true, opts);
                if direct != want {
                    return Err(describe(g, q, "direct", &direct, &want));
                }
                if *cur != want {
                    return Err(describe(g, q, "cursor", cur, &want));
                }
                // the single-metric entry points agree with the composite
                if metrics::historical_interaction_count_with(&store, q.src, q.dst, q.t, opts) != want.hi
                    || metrics::common_neighbor_count_with(&store, q.src, q.dst, q.t, opts) != want.cn
                    || metrics::node_activity_with(&store, q.src, q.t, opts) != want.src_activity
                    || metrics::node_label_distribution(&store, q.dst, EldScope::Destination, q.t) != want.eld_dst
                    || metrics::pair_label_distribution(&store, q.src, q.dst, q.t, opts) != want.eld_pair
                {
                    return Err(format!("graph {} query ({},{},{}): single-metric function disagrees", g, q.src, q.dst, q.t));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// distribution and preference dictionaries

fn expect_buckets(values: &[u64], want: [f64; 7]) -> Result<(), String> {
    let d = DistributionDict::from_values(StructMetric::Hi, Polarity::Positive, values).ok_or("empty sample set")?;
    let keys: Vec<&str> = d.buckets.keys().map(String::as_str).collect();
    let mut expected_keys: Vec<&str> = BUCKET_KEYS.to_vec();
    expected_keys.sort();
    if keys != expected_keys {
        return Err(format!("bucket keys {:?}", keys));
    }
    for (k, w) in BUCKET_KEYS.iter().zip(want) {
        if d.get(k) != w {
            return Err(format!("{:?}: bucket {} = {}, expected {}", values, k, d.get(k), w));
        }
    }
    Ok(())
}

fn eld(counts: &[(u32, u64, u64)]) -> EdgeLabelDistribution {
    let mut e = EdgeLabelDistribution::empty(EldScope::Pair, Timestamp::from_int(100));
    for &(l, c, first) in counts {
        e.counts.insert(LabelId(l), c);
        e.first_seen.insert(LabelId(l), first);
    }
    e
}

fn brute_bucket(values: &[u64], key: &str) -> f64 {
    let hit = |v: u64| match key {
        "=0" => v == 0,
        _ => v > key[1..].parse::<u64>().unwrap(),
    };
    values.iter().filter(|&&v| hit(v)).count() as f64 / values.len() as f64
}

/// Hand-built examples plus randomized sets against a brute-force counter.
pub fn check_dictionaries(random_sets: usize, seed: u64) -> Result<(), String> {
    expect_buckets(&[2, 4, 0, 6], [0.25, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25])?;
    expect_buckets(&[0, 0, 1, 0], [0.75, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0])?;

    // A:3,B:1 true A; A:2,B:2 (A seen first) true B; C:5 true D
    let samples = vec![
        (eld(&[(0, 3, 0), (1, 1, 1)]), LabelId(0)),
        (eld(&[(0, 2, 0), (1, 2, 4)]), LabelId(1)),
        (eld(&[(2, 5, 0)]), LabelId(3)),
        (eld(&[]), LabelId(0)),
    ];
    let p = eld_preference(&samples, EldScope::Pair);
    let third = 100.0 / 3.0;
    if p.counted_samples != 3 || p.top1 != third || p.top2 != third || p.top3 != 0.0 || p.others != third {
        return Err(format!("preference worked example: {:?}", p));
    }

    let mut rng = SeededRng::new(seed);
    for i in 0..random_sets {
        let n = 1 + rng.below(60) as usize;
        let values: Vec<u64> = (0..n).map(|_| rng.below(9)).collect();
        let d = DistributionDict::from_values(StructMetric::Cn, Polarity::Negative, &values).ok_or("empty")?;
        if d.buckets.len() != 7 {
            return Err(format!("set {}: {} buckets", i, d.buckets.len()));
        }
        for k in BUCKET_KEYS {
            if d.get(k) != brute_bucket(&values, k) {
                return Err(format!("set {}: bucket {} differs from the counter", i, k));
            }
        }
        if (d.get("=0") + d.get(">0") - 1.0).abs() > 1e-6 {
            return Err(format!("set {}: =0 and >0 do not partition", i));
        }

        let samples: Vec<(EdgeLabelDistribution, LabelId)> = (0..n)
            .map(|_| {
                let labels = rng.below(5) as u32;
                let counts: Vec<(u32, u64, u64)> = (0..labels).map(|l| (l, 1 + rng.below(4), rng.below(50))).collect();
                (eld(&counts), LabelId(rng.below(6) as u32))
            })
            .collect();
        let p = eld_preference(&samples, EldScope::Source);
        let nonempty = samples.iter().filter(|(h, _)| !h.is_empty()).count() as u64;
        if p.counted_samples != nonempty {
            return Err(format!("set {}: counted {} of {} non-empty histories", i, p.counted_samples, nonempty));
        }
        if nonempty > 0 && (p.top1 + p.top2 + p.top3 + p.others - 100.0).abs() > 1e-6 {
            return Err(format!("set {}: preference percentages sum to {}", i, p.top1 + p.top2 + p.top3 + p.others));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// recall and ranking

pub fn synthetic_evidence(dst: u64, hi: u64, cn: u64, dnf: u64) -> PairEvidence {
    let t = Timestamp::from_int(1000);
    PairEvidence {
        src: NodeId(0),
        dst: NodeId(dst),
        t,
        hi,
        cn,
        src_activity: NodeActivity::default(),
        dst_activity: NodeActivity { frequency: dnf, ..NodeActivity::default() },
        eld_src: EdgeLabelDistribution::empty(EldScope::Source, t),
        eld_dst: EdgeLabelDistribution::empty(EldScope::Destination, t),
        eld_pair: EdgeLabelDistribution::empty(EldScope::Pair, t),
        src_text: String::new(),
        dst_text: String::new(),
        edge_text: None,
    }
}

const METRICS: [StructMetric; 3] = [StructMetric::Hi, StructMetric::Cn, StructMetric::Dnf];
const OPS: [Comparator; 5] = [Comparator::Lt, Comparator::Le, Comparator::Gt, Comparator::Ge, Comparator::Eq];

fn raw(ev: &PairEvidence, metric: StructMetric) -> u64 {
    match metric {
        StructMetric::Hi => ev.hi,
        StructMetric::Cn => ev.cn,
        StructMetric::Dnf => ev.dst_activity.frequency,
    }
}

fn clause_oracle(ev: &PairEvidence, c: &Clause) -> bool {
    let x = raw(ev, c.metric) as f64;
    match c.op {
        Comparator::Lt => x < c.value,
        Comparator::Le => x <= c.value,
        Comparator::Gt => x > c.value,
        Comparator::Ge => x >= c.value,
        Comparator::Eq => x == c.value,
    }
}

fn rule_oracle(ev: &PairEvidence, r: &ThresholdRule) -> bool {
    let mut hits = r.clauses.iter().map(|c| clause_oracle(ev, c));
    match r.combinator {
        Combinator::And => hits.all(|h| h),
        Combinator::Or => hits.any(|h| h),
    }
}

fn random_rule(rng: &mut SeededRng) -> ThresholdRule {
    let clauses = (0..1 + rng.below(3))
        .map(|_| Clause {
            metric: METRICS[rng.below(3) as usize],
            op: OPS[rng.below(5) as usize],
            // half-integral bounds exercise the float comparison
            value: rng.below(14) as f64 / 2.0,
        })
        .collect();
    let combinator = if rng.below(2) == 0 { Combinator::And } else { Combinator::Or };
    ThresholdRule::new(clauses, combinator).expect("finite bounds")
}

fn random_pool(rng: &mut SeededRng, size: usize) -> Vec<PairEvidence> {
    let mut ids: Vec<u64> = (1..=size as u64 * 3).collect();
    rng.shuffle(&mut ids);
    ids.truncate(size);
    ids.into_iter().map(|id| synthetic_evidence(id, rng.below(5), rng.below(5), rng.below(8))).collect()
}

fn oracle_key(ev: &PairEvidence, keys: &[SortKey]) -> (Vec<i64>, u64) {
    let vals = keys.iter().map(|k| if k.descending { -(raw(ev, k.metric) as i64) } else { raw(ev, k.metric) as i64 }).collect();
    (vals, ev.dst.0)
}

fn random_keys(rng: &mut SeededRng) -> Vec<SortKey> {
    let mut ms = METRICS.to_vec();
    rng.shuffle(&mut ms);
    ms.truncate(1 + rng.below(3) as usize);
    ms.into_iter().map(|metric| SortKey { metric, descending: rng.below(2) == 0 }).collect()
}

/// Threshold filtering against direct predicate evaluation, the cap, and the
/// comparator's total-order laws.
pub fn check_recall(pools: usize, seed: u64) -> Result<(), String> {
    let mut rng = SeededRng::new(seed);
    for p in 0..pools {
        let size = rng.below(60) as usize;
        let pool = random_pool(&mut rng, size);
        let rules: Vec<ThresholdRule> = (0..rng.below(4)).map(|_| random_rule(&mut rng)).collect();
        let set = apply_thresholds(NodeId(0), Timestamp::from_int(1000), pool.clone(), &rules);

        let effective = if rules.is_empty() {
            vec![ThresholdRule::new(
                vec![
                    Clause { metric: StructMetric::Hi, op: Comparator::Lt, value: 1.0 },
                    Clause { metric: StructMetric::Cn, op: Comparator::Lt, value: 1.0 },
                ],
                Combinator::And,
            )
            .unwrap()]
        } else {
            rules.clone()
        };
        let kept: Vec<NodeId> = pool.iter().filter(|ev| !effective.iter().any(|r| rule_oracle(ev, r))).map(|ev| ev.dst).collect();
        if set.nodes() != kept {
            return Err(format!("pool {}: kept {:?}, oracle {:?}", p, set.nodes(), kept));
        }
        for x in &set.excluded {
            let ev = pool.iter().find(|e| e.dst == x.node).ok_or("excluded node not in pool")?;
            let first = effective.iter().find(|r| rule_oracle(ev, r));
            if first != Some(&x.rule) {
                return Err(format!("pool {}: node {} attributed to the wrong rule", p, x.node));
            }
        }
        if set.candidates.len() + set.excluded.len() != pool.len() {
            return Err(format!("pool {}: candidates lost", p));
        }

        let keys = random_keys(&mut rng);
        let ranked = rank_candidates(set.clone(), &keys);
        let mut expect = set.candidates.clone();
        expect.sort_by_key(|ev| oracle_key(ev, &keys));
        expect.truncate(DEFAULT_CAP);
        if ranked.nodes() != expect.iter().map(|e| e.dst).collect::<Vec<_>>() {
            return Err(format!("pool {}: ranking differs from the key-tuple oracle", p));
        }
        if ranked.candidates.len() > DEFAULT_CAP {
            return Err(format!("pool {}: {} candidates exceed the cap", p, ranked.candidates.len()));
        }

        // total order over triples
        for _ in 0..20 {
            if pool.len() < 3 {
                break;
            }
            let pick = |rng: &mut SeededRng| &pool[rng.below(pool.len() as u64) as usize];
            let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
            if compare(a, b, &keys) != compare(b, a, &keys).reverse() {
                return Err(format!("pool {}: compare is not antisymmetric", p));
            }
            if (compare(a, b, &keys) == std::cmp::Ordering::Equal) != (a.dst == b.dst) {
                return Err(format!("pool {}: distinct candidates compare equal", p));
            }
            if compare(a, b, &keys).is_le() && compare(b, c, &keys).is_le() && !compare(a, c, &keys).is_le() {
                return Err(format!("pool {}: compare is not transitive", p));
            }
        }
    }

    let big: Vec<PairEvidence> = (0..45).map(|i| synthetic_evidence(i + 1, 1 + i % 3, 0, 0)).collect();
    let set = rank_candidates(apply_thresholds(NodeId(0), Timestamp::from_int(1000), big, &[]), &[]);
    if set.candidates.len() != 20 {
        return Err(format!("45 survivors capped to {}", set.candidates.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scoring

pub fn check_hits() -> Result<(), String> {
    let m = hits_at(&[1, 2, 11, 102], &[1, 3, 10]).map_err(|e| e.to_string())?;
    let got = [m["hits@1"], m["hits@3"], m["hits@10"]];
    if got != [0.25, 0.5, 0.5] {
        return Err(format!("hits for ranks [1,2,11,102]: {:?}", got));
    }
    let mut rng = SeededRng::new(5);
    for _ in 0..200 {
        let ranks: Vec<usize> = (0..1 + rng.below(30)).map(|_| 1 + rng.below(40) as usize).collect();
        let m = hits_at(&ranks, &[1, 3, 10]).map_err(|e| e.to_string())?;
        if !(m["hits@1"] <= m["hits@3"] && m["hits@3"] <= m["hits@10"]) {
            return Err(format!("hits not monotone for {:?}", ranks));
        }
    }
    Ok(())
}

/// Confusion-matrix weighted F1, written independently of the library.
pub fn reference_weighted_f1(pairs: &[(u32, u32)]) -> f64 {
    let labels: BTreeSet<u32> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut cm: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for &(t, p) in pairs {
        *cm.entry((t, p)).or_default() += 1.0;
    }
    let cell = |t: u32, p: u32| cm.get(&(t, p)).copied().unwrap_or(0.0);
    let mut total = 0.0;
    for &c in &labels {
        let tp = cell(c, c);
        let row: f64 = labels.iter().map(|&p| cell(c, p)).sum();
        let col: f64 = labels.iter().map(|&t| cell(t, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += row * f1;
    }
    total / pairs.len() as f64
}

pub fn check_f1(sets: usize, seed: u64) -> Result<(), String> {
    let worked = [(0, 0), (0, 0), (0, 0), (1, 0)];
    let lib = |pairs: &[(u32, u32)]| -> Result<f64, String> {
        let pairs: Vec<(LabelId, LabelId)> = pairs.iter().map(|&(a, b)| (LabelId(a), LabelId(b))).collect();
        Ok(weighted_prf(&pairs).map_err(|e| e.to_string())?["f1"])
    };
    let f = lib(&worked)?;
    if (f - 0.643).abs() > 1e-3 {
        return Err(format!("worked example F1 {}", f));
    }
    let mut rng = SeededRng::new(seed);
    for i in 0..sets {
        let k = 1 + rng.below(6) as u32;
        let pairs: Vec<(u32, u32)> = (0..1 + rng.below(80)).map(|_| (rng.below(k as u64) as u32, rng.below(k as u64 + 1) as u32)).collect();
        let (a, b) = (lib(&pairs)?, reference_weighted_f1(&pairs));
        if (a - b).abs() > 1e-9 {
            return Err(format!("set {}: library {} reference {}", i, a, b));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bipartite

pub fn check_bipartite_cn(queries: usize, seed: u64) -> Result<(), String> {
    let (users, items) = (40u64, 60u64);
    let store = DyTagStore::from_parts(bipartite_dytag(seed, users as usize, items as usize, 2000)).map_err(|e| e.to_string())?;
    if !store.is_bipartite() {
        return Err("generated store is not flagged bipartite".into());
    }
    let horizon = store.edges().last().unwrap().ts.value() as u64 + 2;
    let mut rng = SeededRng::derive(seed, 1);
    let mut qs: Vec<PairQuery> = (0..queries)
        .map(|_| PairQuery::new(NodeId(rng.below(users)), NodeId(users + rng.below(items)), Timestamp::from_int(rng.below(horizon))))
        .collect();
    qs.sort_by_key(|q| q.t);
    let cursor = batch_evidence(&store, &qs, false, MetricOptions::default()).map_err(|e| e.to_string())?;
    let mut nonzero_oracle = 0;
    for (q, ev) in qs.iter().zip(&cursor) {
        let direct = metrics::common_neighbor_count(&store, q.src, q.dst, q.t);
        let scan = scan_cn(store.edges(), q.src, q.dst, q.t, Direction::Undirected);
        nonzero_oracle += usize::from(scan != 0);
        if ev.cn != 0 || direct != 0 {
            return Err(format!("CN({},{},{}) = {} / {}", q.src, q.dst, q.t, ev.cn, direct));
        }
    }
    if nonzero_oracle != 0 {
        return Err(format!("scan oracle found {} nonzero cross-partition CN values", nonzero_oracle));
    }
    Ok(())
}
