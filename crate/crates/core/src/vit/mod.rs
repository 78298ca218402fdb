//! A compact Vision Transformer: patch embedding, pre-norm encoder, class
//! token readout, exact reverse-mode gradients, and a seeded trainer.

pub mod checkpoint;
pub mod config;
pub mod model;
mod ops;
pub mod params;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::ViTConfig;
pub use model::{
    backward, encoder_forward, encoder_forward_traced, forward_loss, head_logits, logits,
    multi_head_attention, patch_embed, AttentionMaps, Batch, Gradients,
};
pub use params::{init_params, LayerParams, ParamSet};
pub use train::{evaluate, train, Dataset, EpochStats, Optimizer, TrainConfig, TrainReport};
