//! Open-vocabulary visual instance search.
//!
//! Region features and subword tokens are mapped into one space by a small
//! self-attention encoder whose token-embedding matrix doubles as the output
//! projection. After training, every instance is scored against every token
//! once and stored in a [`SearchIndex`]; a text query is answered by
//! averaging the stored scores of its tokens.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*32`
//! aliases below name the production instantiation.

pub mod autodiff;
pub mod encoder;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod index;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use autodiff::{Gradients, Graph, NodeId};
pub use encoder::{encode, EncodedSequence, EncoderConfig, EncoderError, ModelParams};
pub use eval::{BBox, ErrorBreakdown, EvalConfig, EvalReport, GroundTruthSet};
pub use index::{QueryResult, SearchIndex, SimilarityMeasure};
pub use scalar::Scalar;
pub use store::InstanceStore;
pub use tensor::{Tensor, TensorError};
pub use training::{MaskingPolicy, Objective, TrainConfig, TrainingExample};
pub use vocab::{TokenId, TokenSequence, Vocabulary};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type EncodedSequence32 = EncodedSequence<f32>;
pub type TrainingExample32 = TrainingExample<f32>;
