//! Multi-hop question answering over a knowledge graph with a
//! question-aware key-value memory network.

pub mod config;
pub mod dataio;
pub mod error;
pub mod kgembed;
pub mod kgstore;
pub mod model;
pub mod qencoder;
pub mod reasoner;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{QaError, Result};
pub use kgstore::{Candidates, EntityId, KnowledgeGraph, RelationId, Triple, TripleId};
pub use model::{Qa2mn, RunManifest};
