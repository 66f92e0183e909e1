//! Real-time streaming video editing, end to end at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff tape.
//! * [`flow`]: rectified-flow path, loss, logit-normal times, Euler sampling, guidance.
//! * [`model`]: the channel-conditioned transformer editor with chunk-causal attention and a rolling KV cache.
//! * [`codec`]: an exactly invertible causal latent codec with 8x8 spatial and 1+4k temporal grouping.
//! * [`distill`]: distribution-matching step distillation and autoregressive self-rollout training.
//! * [`stream`]: the chunked streaming runtime and the latency/throughput calculator.
//! * [`benchmark`]: benchmark construction, score aggregation and rater agreement.
//! * [`curation`]: staged filtering pipelines with retention accounting and edit-pair construction.

pub mod error;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod flow;
pub mod toy;
pub mod model;
pub mod codec;
pub mod distill;
pub mod stream;
pub mod benchmark;
pub mod curation;

pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, Bound, Ema, ParamId, ParamSet, Trainable};
pub use tensor::{Gradients, Graph, Scalar, Tensor, Var};
