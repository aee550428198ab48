//! Semantic log parsing.
//!
//! The pipeline mines concept–instance (CI) pairs from tokenized log
//! messages with a multi-task neural miner ([`miner`]), resolves instances
//! whose concept is absent from the message through an accumulated domain
//! knowledge base ([`knowledge`], [`jparser`]), emits conceptualized
//! templates, and turns the results into session features for anomaly
//! detection and failure diagnosis ([`downstream`]).

pub mod downstream;
pub mod features;
pub mod jparser;
pub mod knowledge;
pub mod logio;
pub mod miner;
pub mod neuralcore;
