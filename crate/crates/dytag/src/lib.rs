//! File formats, HTTP transport, pipeline orchestration and the command line
//! for the `dytag-core` prediction engine.

pub mod config;
pub mod http;
pub mod ingest;
pub mod pipeline;
pub mod rules;
pub mod transcript;
