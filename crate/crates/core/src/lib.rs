//! Semi-supervised semantic segmentation with two-way knowledge delivery
//! between the labeled and unlabeled learning flows.
//!
//! The pipeline pairs every labeled sample in a batch with an unlabeled
//! one and exchanges what each side has and the other lacks:
//!
//! * labeled → unlabeled: a foreground patch and its annotation are pasted
//!   into the unlabeled image and its pseudo-label ([`l2u`]), giving the
//!   unlabeled flow pockets of exact supervision;
//! * unlabeled → labeled: every encoder block runs channel-wise
//!   cross-attention with queries from the labeled flow and keys/values
//!   from the unlabeled flow ([`model`]), mixing unlabeled feature
//!   statistics into the labeled flow.
//!
//! Around that sit a synthetic multi-domain corpus generator ([`datagen`]),
//! batch assembly ([`dataio`]), a pseudo-labeling training loop
//! ([`training`]) and segmentation metrics ([`metrics`]).
//!
//! All numeric code is generic over [`Scalar`] (f32 or f64); concrete
//! aliases for both precisions are exported at the crate root.

pub mod checkpoint;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod l2u;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Batched image/feature volume, axes `[batch, channel, height, width]`.
pub type Tensor4<S> = ndarray::Array4<S>;

pub type Tensor4F32 = Tensor4<f32>;
pub type Tensor4F64 = Tensor4<f64>;
pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type TrainStateF32 = training::TrainState<f32>;
pub type TrainStateF64 = training::TrainState<f64>;
