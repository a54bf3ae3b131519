//! Contrastive pre-training of clinical-note and diagnostic-code encoders for
//! automated ICD coding, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`tokenize`]: code vocabulary and byte-pair text tokenizer.
//! * [`data`]: synthetic longitudinal cohorts plus file loaders.
//! * [`code_encoder`] / [`text_encoder`]: the two transformer encoders.
//! * [`contrastive`]: projection heads, InfoNCE, uncertainty weighting, trainer.
//! * [`finetune`]: description fine-tuning, prompt classification, re-ranking.
//! * [`metrics`]: multi-label evaluation.
//! * [`analysis`]: Procrustes alignment, retrieval, embedding export.
//! * [`pipeline`]: staged runs driven by a [`config::RunConfig`].
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32` and gradient
//! checks use `f64`.

// `!(x > y)` checks deliberately reject NaN; index loops mirror tensor math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod analysis;
pub mod checkpoint;
pub mod code_encoder;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text_encoder;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
