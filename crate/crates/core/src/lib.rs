//! Knowledge-graph augmented text-image retrieval.
//!
//! Captions are expanded with triplets mined from a knowledge graph, the
//! caption and knowledge embeddings are fused by cross-attention into a joint
//! text-image space, and the model is trained with a contrastive loss plus an
//! image-text matching loss. Retrieval is scored with R@k and mean recall.
//!
//! Modules, bottom-up:
//!
//! - [`kg`]: triplet stores, TSV loading, source combination.
//! - [`knowledge_text`]: keywords, triplet selection, knowledge sentences, token ids.
//! - [`tensor_ad`]: tensors, reverse-mode differentiation, AdamW, checkpoints.
//! - [`encoders`]: image/text transformers, knowledge fusion, matching head.
//! - [`objectives`]: contrastive and matching losses.
//! - [`retrieval_eval`]: scoring, ranking, recall metrics, CSV export.
//! - [`data_synth`]: synthetic scenes, dataset manifests, PPM images.
//! - [`pipeline`]: the extract / train / eval entry points.

pub mod data_synth;
pub mod encoders;
pub mod kg;
pub mod knowledge_text;
pub mod objectives;
pub mod pipeline;
pub mod retrieval_eval;
pub mod tensor_ad;

pub use encoders::{EncoderConfig, FusionMode, Model};
pub use kg::{KnowledgeGraph, Source, Triplet};
pub use knowledge_text::{SelectionStrategy, TextSample, Vocabulary};
pub use retrieval_eval::RetrievalMetrics;
pub use tensor_ad::{Tape, Tensor, Var};
