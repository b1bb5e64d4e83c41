//! Exact layer-wise modality decomposition for multi-sensor fusion networks.
//!
//! A fusion network is run once on the full multimodal input to record the
//! behavior of every non-linear layer. The network is then replaced by its
//! linearization around that recording, and `M + 1` component streams (one
//! per input modality plus a bias stream) are pushed through it. At every
//! layer the components sum to the original activation.

pub mod baselines;
pub mod error;
pub mod lmd;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use lmd::{decompose, propagate, record, DecomposedTensor, Decomposition, RecordedState, SplitConfig};
pub use model::{forward, LayerKind, LayerSpec, ModalityId, ModelGraph, SampleSet};
pub use tensor::Tensor;
