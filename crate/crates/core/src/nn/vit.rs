use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{sincos_2d, Block, LayerNorm, Linear};
use super::params::Params;
use crate::error::{Error, Result};

/// Vision-transformer geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl VitConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size[0] / self.patch_size, self.image_size[1] / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not a multiple of patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config("embed dim must be a multiple of 4".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    /// Layer count used for layer-wise learning-rate decay: the embedding,
    /// each block, and the output side.
    pub fn decay_layers(&self) -> usize {
        self.depth + 2
    }
}

/// `(B, C, H, W)` images to `(B, N, p·p·C)` patch rows, patches in row-major
/// grid order and each row laid out as (py, px, c).
pub fn patchify_tensor(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Encoder half shared by the autoencoder and the fine-tuned classifiers.
#[derive(Clone)]
pub struct VitEncoder {
    pub config: VitConfig,
    patch_embed: Linear,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VitEncoder {
    pub fn new(p: &mut Params, prefix: &str, config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let patch_embed = Linear::new(p, &format!("{prefix}patch_embed"), config.patch_dim(), config.embed_dim, 0)?;
        let cls_token = p.trunc_normal(&format!("{prefix}cls_token"), &[1, 1, config.embed_dim], 0.02, 0, false)?;
        let pos_embed = position_table(config.embed_dim, config.grid(), p.dtype())?;
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    p,
                    &format!("{prefix}blocks.{i}"),
                    config.embed_dim,
                    config.heads,
                    config.mlp_ratio,
                    i + 1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(p, &format!("{prefix}norm"), config.embed_dim, config.depth + 1)?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// Patch rows `(B, N, P)` to position-tagged tokens `(B, N, D)`.
    pub fn embed_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let n = patches.dims3()?.1;
        let pos = self.pos_embed.narrow(1, 1, n)?;
        Ok(self.patch_embed.forward(patches)?.broadcast_add(&pos)?)
    }

    /// Prepends the class token and runs the transformer stack.
    pub fn encode_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let b = tokens.dims3()?.0;
        let cls = (&self.cls_token + self.pos_embed.narrow(1, 0, 1)?)?;
        let cls = cls.broadcast_as((b, 1, self.config.embed_dim))?;
        let mut x = Tensor::cat(&[&cls, tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Mean of the encoded patch tokens for `(B, C, H, W)` images.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let patches = patchify_tensor(images, self.config.patch_size)?;
        let tokens = self.embed_patches(&patches)?;
        let x = self.encode_tokens(&tokens)?;
        let n = x.dims3()?.1 - 1;
        Ok(x.narrow(1, 1, n)?.mean(1)?)
    }
}

/// `(1, 1 + rows·cols, dim)` table with a zero row for the class token.
pub fn position_table(dim: usize, grid: (usize, usize), dtype: DType) -> Result<Tensor> {
    let mut values = vec![0.0f64; dim];
    values.extend(sincos_2d(dim, grid.0, grid.1));
    let n = 1 + grid.0 * grid.1;
    Ok(Tensor::from_vec(values, (1, n, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
