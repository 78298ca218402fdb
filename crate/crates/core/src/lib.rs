//! Keyed block-pixel image encryption with ciphertext-only attacks, security
//! metrics, and a from-scratch Vision Transformer for classifying
//! encrypted images.

pub mod attacks;
pub mod codec;
pub mod error;
pub mod imagecore;
pub mod keyschedule;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamSet64 = vit::ParamSet<f64>;
pub type ParamSet32 = vit::ParamSet<f32>;
pub type Dataset64 = vit::Dataset<f64>;
pub type Dataset32 = vit::Dataset<f32>;
pub type Batch64 = vit::Batch<f64>;
