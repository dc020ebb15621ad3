//! Masked-autoencoder pretraining: patching, masking, objective, model and
//! training loop.

mod config;
mod loss;
mod model;
mod patch;
mod train;

pub use config::{Augmentation, MaeConfig, OptimizerConfig};
pub use loss::{normalize_patches, reconstruction_loss, reconstruction_loss_grid};
pub use model::{images_to_tensor, mask_tensor, MaeModel, MAE_KIND};
pub use patch::{masked_count, patchify, sample_mask, sample_mask_with, unpatchify, MaskPattern, PatchGrid};
pub use train::{composite, pretrain, random_resized_crop, reconstruct, PretrainReport, StepRecord};
