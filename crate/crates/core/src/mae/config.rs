use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Fraction of the image area kept by the random resized crop.
    pub crop_area: [f64; 2],
    pub horizontal_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub image_size: [usize; 2],
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub normalize_pixel_loss: bool,
    pub optimizer: OptimizerConfig,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Optional checkpoint whose matching parameters seed the model.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for MaeConfig {
    /// ViT-L/16 autoencoder with the pretraining recipe used for the
    /// published backbone.
    fn default() -> Self {
        Self {
            image_size: [224, 224],
            channels: 3,
            patch_size: 16,
            encoder_depth: 24,
            encoder_dim: 1024,
            encoder_heads: 16,
            decoder_depth: 8,
            decoder_dim: 512,
            decoder_heads: 16,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            normalize_pixel_loss: false,
            optimizer: OptimizerConfig {
                base_lr: 7.5e-5,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
            },
            warmup_ratio: 0.05,
            epochs: 50,
            batch_size: 128,
            augmentation: Augmentation {
                crop_area: [0.2, 1.0],
                horizontal_flip: true,
            },
            seed: 0,
            init_checkpoint: None,
        }
    }
}

impl MaeConfig {
    /// Desk-scale model for 64×64 grayscale images: patch 8, encoder 2×64,
    /// decoder 2×64. Crops stay mild since synthetic images are already
    /// framed on the anatomy.
    pub fn toy() -> Self {
        Self {
            image_size: [64, 64],
            channels: 1,
            patch_size: 8,
            encoder_depth: 2,
            encoder_dim: 64,
            encoder_heads: 4,
            decoder_depth: 2,
            decoder_dim: 64,
            decoder_heads: 4,
            optimizer: OptimizerConfig {
                base_lr: 1.5e-3,
                ..Self::default().optimizer
            },
            epochs: 10,
            batch_size: 32,
            augmentation: Augmentation {
                crop_area: [0.8, 1.0],
                horizontal_flip: true,
            },
            ..Self::default()
        }
    }

    pub fn encoder(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.encoder_dim,
            depth: self.encoder_depth,
            heads: self.encoder_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.encoder().num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 || self.decoder_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must be a multiple of 4 and of {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let [lo, hi] = self.augmentation.crop_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop area range [{lo}, {hi}] invalid")));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        Ok(())
    }
}
