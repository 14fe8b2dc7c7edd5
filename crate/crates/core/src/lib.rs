//! Test-time feature rectification for few-shot classification.
//!
//! Each image is described by a whole-image ("totality") embedding and the
//! embeddings of random crops. The crop mean ("closure" estimate) and the
//! whole-image embedding are fused with a diagonal weight before
//! nearest-prototype classification.
//!
//! Modules:
//! - [`store`]: embedding records and the GGFS container.
//! - [`episode`]: seeded N-way K-shot Q-query episodes.
//! - [`estimator`]: totality/closure estimates, fusion and the optimal weight.
//! - [`classifier`]: prototypes, distances, softmax and NLL.
//! - [`synth`]: Gaussian ground-truth model and brute-force validators.
//! - [`harness`]: evaluation runs, ablations, sweeps and variance reports.

pub mod classifier;
pub mod config;
pub mod episode;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod seeds;
pub mod store;
pub mod synth;

pub use classifier::{DistanceMetric, Prototype};
pub use config::FusionConfig;
pub use episode::{Episode, EpisodeSpec};
pub use error::{GgiuError, Result};
pub use estimator::{CovarianceDiag, LambdaDiag};
pub use harness::EvalReport;
pub use store::{EmbeddingDataset, FeatureVector, ImageRecord};
pub use synth::{GaussianImageModel, SynthRecipe};
