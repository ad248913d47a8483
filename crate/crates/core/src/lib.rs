//! Prediction engine for dynamic text-attributed graphs.
//!
//! The crate is `no_std` (with `alloc`) and holds every deterministic piece of
//! the pipeline: the indexed edge store, strict-past structural metrics,
//! validation statistics, chat-completion abstractions with a scripted mock,
//! the agent roles that turn statistics into reusable knowledge, candidate
//! recall and ranking, prompt assembly for the three prediction tasks, and
//! scoring. File formats, HTTP transport and the command line live in the
//! `dytag` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod eval;
pub mod graph;
pub mod knowledge;
pub mod llm;
pub mod metrics;
pub mod predict;
pub mod prompt;
pub mod recall;
pub mod rng;
pub mod stats;
pub mod synth;

pub use graph::{fixtures, DyTagStore, LabelId, NodeId, SplitView, StoreError, StoreParts, TemporalEdge, TextId, Timestamp};
pub use metrics::{Direction, EdgeLabelDistribution, EldScope, EvidenceCursor, MetricOptions, NodeActivity, PairEvidence, PairQuery};
