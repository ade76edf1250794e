//! Co-modality dense retrieval over page images and their extracted text.
//!
//! Each page carries one image embedding and one text embedding in a shared
//! space. A query is scored against both, each modality's scores are squashed
//! with a sigmoid and standardized across the candidate pool, and the two are
//! blended with a text weight `beta`. The crate also ships ranking metrics,
//! score-distribution diagnostics and a small trainer for the dual-sigmoid
//! alignment loss.

pub mod ablation;
pub mod diagnostics;
pub mod dsa;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod queries;
pub mod run_file;
pub mod store;
pub mod synthetic;

pub use fusion::{retrieve, retrieve_all, score_query, sigmoid, zscore_normalize};
pub use metrics::{Metric, Qrels};
pub use model::{
    Corpus, EmbeddingVector, FusionConfig, FusionMode, Modality, PageEntry, QueryRecord,
    RankedEntry, RankedResult, ScoreVector,
};
pub use store::{load_index, save_index, IndexDirectory, PackedMatrix};
