//! Seeded synthetic graphs for tests, benchmarks and smoke runs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{LabelId, NodeId, StoreParts, TemporalEdge, TextId, Timestamp};
use crate::rng::SeededRng;

const TOPICS: [(&str, &[&str]); 4] = [
    ("work", &["budget", "meeting", "deadline", "contract", "report", "review"]),
    ("personal", &["dinner", "weekend", "birthday", "family", "trip", "movie"]),
    ("news", &["market", "election", "storm", "launch", "merger", "rates"]),
    ("support", &["ticket", "error", "refund", "install", "password", "upgrade"]),
];

fn sentence(rng: &mut SeededRng, words: &[&str], len: usize) -> String {
    let picked: Vec<&str> = (0..len).map(|_| words[rng.below(words.len() as u64) as usize]).collect();
    picked.join(" ")
}

/// A community-structured DyTAG: repeated pairs are common, labels follow
/// the source community with some noise, and every edge carries text.
pub fn community_dytag(seed: u64, nodes: usize, edges: usize) -> StoreParts {
    assert!(nodes >= 4 && edges >= 1, "need at least 4 nodes and one edge");
    let mut rng = SeededRng::new(seed);
    let communities = TOPICS.len();
    let community = |n: usize| n % communities;
    let mut partners: Vec<Vec<usize>> = alloc::vec![Vec::new(); nodes];
    let mut out_edges = Vec::with_capacity(edges);
    let mut edge_texts = Vec::with_capacity(edges);
    let mut t = 0u64;
    for i in 0..edges {
        // a small hot set of sources, like real interaction logs
        let src = if rng.below(10) < 6 { rng.below((nodes / 5).max(2) as u64) as usize } else { rng.below(nodes as u64) as usize };
        let dst = if !partners[src].is_empty() && rng.below(2) == 0 {
            partners[src][rng.below(partners[src].len() as u64) as usize]
        } else {
            let c = community(src);
            let pick = loop {
                let d = if rng.below(4) == 0 {
                    rng.below(nodes as u64) as usize
                } else {
                    let k = rng.below((nodes / communities) as u64) as usize;
                    (k * communities + c) % nodes
                };
                if d != src {
                    break d;
                }
            };
            partners[src].push(pick);
            pick
        };
        let label = if rng.below(5) == 0 { rng.below(communities as u64) as usize } else { community(src) };
        t += 1 + rng.below(3);
        let (_, words) = TOPICS[label];
        edge_texts.push((TextId(i as u64), sentence(&mut rng, words, 4)));
        out_edges.push(TemporalEdge {
            src: NodeId(src as u64),
            dst: NodeId(dst as u64),
            ts: Timestamp::from_int(t),
            label: LabelId(label as u32),
            text_id: Some(TextId(i as u64)),
        });
    }
    let node_texts = (0..nodes)
        .map(|n| {
            let (topic, words) = TOPICS[community(n)];
            (NodeId(n as u64), format!("user {} interested in {}: {}", n, topic, sentence(&mut rng, words, 3)))
        })
        .collect();
    StoreParts {
        edges: out_edges,
        node_texts,
        edge_texts,
        labels: TOPICS.iter().enumerate().map(|(i, (name, _))| (LabelId(i as u32), String::from(*name))).collect(),
        bipartite: false,
    }
}

/// Users `0..users` interact only with items `users..users + items`.
pub fn bipartite_dytag(seed: u64, users: usize, items: usize, edges: usize) -> StoreParts {
    assert!(users >= 1 && items >= 1 && edges >= 1);
    let mut rng = SeededRng::new(seed);
    let out_edges = (0..edges)
        .map(|i| {
            let u = rng.below(users as u64);
            let v = users as u64 + rng.below(items as u64);
            TemporalEdge {
                src: NodeId(u),
                dst: NodeId(v),
                ts: Timestamp::from_int(i as u64 / 2),
                label: LabelId(rng.below(3) as u32),
                text_id: None,
            }
        })
        .collect();
    StoreParts {
        edges: out_edges,
        node_texts: (0..(users + items) as u64)
            .map(|n| (NodeId(n), if n < users as u64 { format!("user {}", n) } else { format!("item {}", n) }))
            .collect(),
        edge_texts: Vec::new(),
        labels: (0..3).map(|l| (LabelId(l), format!("rating {}", l + 1))).collect(),
        bipartite: true,
    }
}

/// A small random multigraph: up to `max_nodes` nodes, `max_edges` edges and
/// `max_labels` labels, with many timestamp ties and self-loops allowed.
pub fn random_small(rng: &mut SeededRng, max_nodes: usize, max_edges: usize, max_labels: usize) -> StoreParts {
    let nodes = 2 + rng.below(max_nodes.saturating_sub(1) as u64) as usize;
    let n_edges = 1 + rng.below(max_edges as u64) as usize;
    let labels = 1 + rng.below(max_labels as u64) as usize;
    let horizon = 1 + rng.below(n_edges as u64);
    let edges = (0..n_edges)
        .map(|i| TemporalEdge {
            src: NodeId(rng.below(nodes as u64)),
            dst: NodeId(rng.below(nodes as u64)),
            ts: Timestamp::from_int(rng.below(horizon)),
            label: LabelId(rng.below(labels as u64) as u32),
            text_id: if rng.below(3) == 0 { None } else { Some(TextId(i as u64)) },
        })
        .collect::<Vec<_>>();
    let edge_texts = edges.iter().filter_map(|e| e.text_id).map(|t| (t, format!("text {}", t.0 % 5))).collect();
    StoreParts {
        edges,
        node_texts: (0..nodes as u64).map(|n| (NodeId(n), format!("node {}", n))).collect(),
        edge_texts,
        labels: (0..labels as u32).map(|l| (LabelId(l), format!("L{}", l))).collect(),
        bipartite: false,
    }
}
