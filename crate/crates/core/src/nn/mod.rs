//! Minimal transformer building blocks over candle tensors.

mod layers;
mod optim;
mod params;
mod vit;

pub use layers::{log_softmax_last, sincos_2d, softmax_last, Attention, Block, LayerNorm, Linear, Mlp};
pub use optim::{layerwise_scales, AdamW, CosineSchedule};
pub use params::{Param, Params};
pub use vit::{patchify_tensor, position_table, VitConfig, VitEncoder};
