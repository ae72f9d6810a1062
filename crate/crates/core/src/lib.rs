//! Allocation-only core of the `pkgscan` pipeline.
//!
//! Everything in this crate is pure: no filesystem, network or clock access.
//! The std companion crate (`pkgscan`) supplies package ingestion, Python
//! parsing, provider transports, file formats and the command line, and plugs
//! into the traits defined here ([`chat::ChatModel`], [`retrieval::Embedder`],
//! [`crag::Grader`]).

#![no_std]

extern crate alloc;

pub mod chat;
pub mod crag;
pub mod dataset;
pub mod describe;
pub mod features;
pub mod kb;
pub mod label;
pub mod metrics;
pub mod prompts;
pub mod retrieval;
pub mod text;
pub mod verdict;
pub mod yara;

pub use chat::{ChatError, ChatMessage, ChatModel, Role};
pub use features::{FeatureCode, FeatureVector, SignatureManifest};
pub use label::Label;
pub use verdict::Outcome;
