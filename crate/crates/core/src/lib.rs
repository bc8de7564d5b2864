//! Class-incremental learning over frozen vision-language embeddings.
//!
//! A square linear adapter is trained on precomputed image embeddings and
//! scored by cosine similarity against fixed class text embeddings. Old
//! classes are replayed from per-class Gaussian models, neighboring old/new
//! classes (close in text space) are pushed apart with a margin loss, and
//! consecutive adapter weights are fused in the SVD basis of the previous
//! weight after each task.
//!
//! Modules:
//! - [`store`]: `RAPF-EMB v1` files and synthetic benchmarks
//! - [`stats`]: Gaussian class models and replay sampling
//! - [`adapter`]: forward pass, losses, gradients, Adam, learning-rate schedule
//! - [`neighbors`]: text-distance matrix and neighbor-pair selection
//! - [`fusion`]: decomposed parameter fusion
//! - [`driver`]: the incremental protocol, metrics and reports
//!
//! The `parallel` feature (on by default) runs batch gradients, class-wise
//! statistics, evaluation and seeds on rayon; [`Exec::Sequential`] or a build
//! without the feature gives bit-identical results on one thread.

pub mod adapter;
pub mod driver;
pub mod error;
pub mod fusion;
pub mod neighbors;
pub mod par;
pub mod rng;
pub mod stats;
pub mod store;

pub use adapter::{AdamConfig, AdapterState, Batch, HingeItem, LossReport, TextSlice};
pub use driver::{Ablation, ProtocolConfig, RunConfig, RunMetrics, RunReport, TaskStream};
pub use error::{RapfError, Result};
pub use fusion::{FusionConfig, FusionTrace};
pub use neighbors::{NeighborPair, NeighborPairSet};
pub use par::Exec;
pub use stats::ClassStats;
pub use store::{ClassCatalog, EmbeddingSource, EmbeddingStore, LabeledEmbedding, Split};
