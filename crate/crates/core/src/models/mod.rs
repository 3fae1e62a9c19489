//! Model builders and state: generator, noisy layer, teacher/student
//! classifiers, class-representative embeddings, and checkpoint plumbing.

pub mod checkpointing;
pub mod cnn;
pub mod embedding;
pub mod generator;

pub use checkpointing::TensorSink;
pub use cnn::{CnnForward, CnnModel, CnnSpec};
pub use embedding::{
    class_center_embeddings, class_centers_from_embeddings, derive_radii, load_embedding_table,
    min_pairwise_mse, save_embedding_table, ClassEmbeddingTable, EmbeddingSource,
};
pub use generator::{generate_batch, Generator, GeneratorSpec, NoisyLayer};
