//! Files: embedding and prototype containers, run configs, reports.

pub mod config;
pub mod container;
pub mod report;

pub use config::{load_config, parse_config, render_config};
pub use container::{
    import_embeddings_csv, import_prototypes_csv, read_embeddings, read_prototypes,
    write_embeddings, write_prototypes, EmbeddingFile,
};
pub use report::{to_json, write_csv, write_json};
