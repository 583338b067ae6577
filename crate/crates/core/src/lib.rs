//! Unsupervised detection of malicious agents in multi-agent interaction
//! graphs.
//!
//! The pipeline trains a hierarchical agent encoder contrastively on normal
//! interaction graphs whose features are corrupted on the fly, scores agents
//! of a new graph by how dissimilar their representations are from everyone
//! else's, flags the top-K, and prunes every edge around them. [`sim`]
//! provides a seeded multi-agent simulation harness for measuring attack
//! success with and without the defense.

pub mod corruption;
pub mod detection;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod parallel;
pub mod remediation;
pub mod rng;
pub mod sim;
pub mod training;

pub use error::{Error, ErrorClass, Result};
