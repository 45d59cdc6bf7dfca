//! Speaker embeddings from representation stacks.

mod aggregate;
mod module;
mod weights;

pub use aggregate::{AggregateCache, Aggregator, AggregatorKind, AttentivePool, AveragePool};
pub use module::{EmbeddingCache, EmbeddingModule, EmbeddingRole, SpeakerEmbedding, StatsEmbedder};
pub use weights::LayerWeights;
