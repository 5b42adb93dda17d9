//! Forced prompt learning for few-shot out-of-distribution detection.
//!
//! A learnable *forced* prompt is trained against a frozen *original* prompt
//! with the FCE-K objective. Test images are scored with MCM / GL-MCM over
//! the resulting dual prompt bank, and detectors are evaluated with FPR95,
//! AUROC and ID top-1 accuracy.
//!
//! The crate ships a deterministic toy encoder so that the whole pipeline
//! runs without model weights, and a cache backend that replays embeddings
//! computed elsewhere.

pub mod ablation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod objective;
pub mod prompt;
pub mod scoring;
pub mod train;

mod numeric;

pub use encoder::{
    EncoderSpec, ImageEncoder, ImageFeatures, TextEncoder, TextFeatureSet, ToyEncoder, Vocab,
};
pub use error::{Error, ErrorKind, Result};
pub use metrics::MetricsReport;
pub use objective::SimilarityPair;
pub use prompt::{DualPromptBank, InitMode, PromptContext};
pub use scoring::{ScoreConfig, ScoreKind, ScoredSample};
pub use train::{TrainConfig, TrainLog};
