//! Memory-construction engine for long-term dialogue agents.
//!
//! The crate builds a four-part memory bank (core profile block plus
//! episodic, semantic, and procedural entry sections) from conversation
//! sessions, scores candidate banks with dense session-level QA rewards,
//! attributes credit to the memory type that drove retrieval, and verifies
//! the resulting clipped, weighted policy objective on a small tabular
//! softmax policy.

pub mod adrpo;
pub mod attribution;
pub mod codec;
pub mod gateway;
pub mod memory;
pub mod prompts;
pub mod reward;

pub mod store;
pub mod synthetic;
