//! Conversational exploration of a biomedical knowledge graph.
//!
//! An LLM answers questions with inline entity/relation markers; the
//! markers are parsed into triples, each triple is verified against the
//! graph, and the verified results accumulate into a per-session graph that
//! drives follow-up recommendations.

pub mod annotation;
pub mod config;
pub mod gateway;
pub mod grounding;
pub mod kg;
pub mod pipeline;
pub mod recommend;
pub mod session;
