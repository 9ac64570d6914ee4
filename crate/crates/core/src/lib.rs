//! Platform-aware mixture-of-experts retrieval of gallery images from text
//! queries: corpus handling, caption preprocessing, the gated expert model,
//! two-stage training and recall evaluation.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod textprep;
pub mod train;

pub use corpus::{Corpus, Embedding, GalleryItem, PerPlatform, Platform, QueryRecord};
pub use error::{PemoeError, Result};
pub use eval::{EvalReport, Ranking};
pub use model::{Fusion, ModelDims, PeMoeModel};
pub use rng::SplitMix64;
pub use train::{TrainConfig, Triplet, Variant};
