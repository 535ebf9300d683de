//! Object-aware end-to-end vision-language pretraining with knowledge
//! distillation from detector outputs, at desk scale.
//!
//! The crate covers the synthetic grounded corpus, external-knowledge
//! derivations (region masks, phrase-label similarities), the grid-feature
//! encoder and joint Transformer, the four pretext losses, the training loop,
//! and the evaluation probes.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod knowledge;
pub mod model;
pub mod params;
pub mod pretext;
pub mod probe;
pub mod tensor;
pub mod trainer;

pub use config::{MvmVariant, NegativeSource, TrainConfig};
pub use corpus::{
    generate_synthetic, load_corpus, save_corpus, BBox, Corpus, DetectorAnnotation, ImageTextPair, ObjectProposal,
    SyntheticSceneSpec,
};
pub use encoder::{JointSequence, TokenSequence, VisualGrid, Vocabulary};
pub use error::{Error, Result};
pub use fusion::{FinalStates, FusionParams, HeadSelect};
pub use knowledge::{BinaryMask, SimilarityMatrix, TextEmbedder};
pub use model::{Model, ModelDims};
pub use pretext::{LossReport, PretextBatch, Task};
pub use probe::{AblationTable, AlignmentResult, ProbeReport, RetrievalResult};
pub use tensor::Mat;
pub use trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainOptions, TrainOutcome};
