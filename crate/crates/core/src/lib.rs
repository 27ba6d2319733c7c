//! Long-context question answering with a chain of memory agents.
//!
//! A planner seeds sub-questions, workers read the document chunk by chunk
//! through a fixed extract → infer → refine cycle over a shared structured
//! memory, and a manager writes the final answer from that memory. Two
//! baselines (a rolling-summary chain and a middle-truncated single call) run
//! behind the same [`pipeline::Method`] trait, and every run produces an
//! auditable [`trace::RunTrace`].

pub mod agents;
pub mod chunking;
pub mod eval;
pub mod llm;
pub mod memory;
pub mod pipeline;
pub mod trace;
