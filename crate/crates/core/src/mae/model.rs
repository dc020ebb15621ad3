use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::config::MaeConfig;
use super::loss::reconstruction_loss;
use super::patch::{MaskPattern, PatchGrid};
use crate::checkpoint::{expect_kind, load_params, read_meta, CheckpointMeta};
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::nn::{patchify_tensor, position_table, Block, LayerNorm, Linear, Params, VitEncoder};

pub const MAE_KIND: &str = "mae";

/// Stacks `H×W×C` images into a `(B, C, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut buf = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape("images in a batch must share one shape".into()));
        }
        let d = img.data();
        for ch in 0..c {
            buf.extend((0..h * w).map(|k| d[k * c + ch]));
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Masked autoencoder: a ViT encoder over visible patches and a light
/// transformer decoder that predicts pixels of every patch.
pub struct MaeModel {
    pub config: MaeConfig,
    params: Params,
    encoder: VitEncoder,
    decoder_embed: Linear,
    mask_token: Tensor,
    decoder_pos: Tensor,
    decoder_blocks: Vec<Block>,
    decoder_norm: LayerNorm,
    decoder_pred: Linear,
}

impl MaeModel {
    pub fn new(config: &MaeConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut p = Params::new(config.seed, dtype);
        let enc = config.encoder();
        let encoder = VitEncoder::new(&mut p, "encoder.", &enc)?;
        let top = enc.depth + 1;
        let decoder_embed = Linear::new(&mut p, "decoder.embed", config.encoder_dim, config.decoder_dim, top)?;
        let mask_token = p.trunc_normal("decoder.mask_token", &[1, 1, config.decoder_dim], 0.02, top, false)?;
        let decoder_pos = position_table(config.decoder_dim, enc.grid(), dtype)?;
        let decoder_blocks = (0..config.decoder_depth)
            .map(|i| {
                Block::new(
                    &mut p,
                    &format!("decoder.blocks.{i}"),
                    config.decoder_dim,
                    config.decoder_heads,
                    config.mlp_ratio,
                    top,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut p, "decoder.norm", config.decoder_dim, top)?;
        let decoder_pred = Linear::new(&mut p, "decoder.pred", config.decoder_dim, enc.patch_dim(), top)?;
        let model = Self {
            config: config.clone(),
            params: p,
            encoder,
            decoder_embed,
            mask_token,
            decoder_pos,
            decoder_blocks,
            decoder_norm,
            decoder_pred,
        };
        if let Some(init) = &config.init_checkpoint {
            load_params(init, &model.params, false)?;
        }
        Ok(model)
    }

    /// Restores a model written by [`crate::mae::pretrain`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        expect_kind(&meta, MAE_KIND)?;
        let mut config: MaeConfig = serde_json::from_value(meta.config)
            .map_err(|e| Error::Checkpoint(format!("bad mae config: {e}")))?;
        config.init_checkpoint = None;
        let model = Self::new(&config, DType::F32)?;
        load_params(dir, &model.params, true)?;
        Ok(model)
    }

    pub fn meta(&self, step: usize, epoch: usize, metric: Option<f64>) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            kind: MAE_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            step,
            epoch,
            metric,
            extra: serde_json::Value::Null,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Decoder output `(B, N, P)` for patch rows `(B, N, P)`. Every mask in
    /// the batch must hide the same number of patches.
    pub fn forward(&self, patches: &Tensor, masks: &[MaskPattern]) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        if masks.len() != b || masks.iter().any(|m| m.len() != n) {
            return Err(Error::Shape(format!("need {b} masks over {n} patches")));
        }
        let n_masked = masks[0].masked_count();
        if masks.iter().any(|m| m.masked_count() != n_masked) {
            return Err(Error::Shape("masks in a batch must hide equally many patches".into()));
        }
        let n_vis = n - n_masked;
        let mut keep = Vec::with_capacity(b * n_vis);
        let mut restore = Vec::with_capacity(b * n);
        for (s, m) in masks.iter().enumerate() {
            keep.extend(m.visible_indices().into_iter().map(|i| (s * n + i) as u32));
            let (mut vis, mut hid) = (0usize, n_vis);
            for i in 0..n {
                if m.is_masked(i) {
                    restore.push((s * n + hid) as u32);
                    hid += 1;
                } else {
                    restore.push((s * n + vis) as u32);
                    vis += 1;
                }
            }
        }
        let dev = patches.device();
        let d = self.config.encoder_dim;
        let dd = self.config.decoder_dim;

        let tokens = self.encoder.embed_patches(patches)?.reshape((b * n, d))?;
        let keep = Tensor::from_vec(keep, b * n_vis, dev)?;
        let visible = tokens.index_select(&keep, 0)?.reshape((b, n_vis, d))?;
        let latent = self.encoder.encode_tokens(&visible)?;

        let x = self.decoder_embed.forward(&latent)?;
        let cls = x.narrow(1, 0, 1)?;
        let mut parts = vec![x.narrow(1, 1, n_vis)?];
        if n_masked > 0 {
            parts.push(self.mask_token.broadcast_as((b, n_masked, dd))?.contiguous()?);
        }
        let full = Tensor::cat(&parts, 1)?.reshape((b * n, dd))?;
        let restore = Tensor::from_vec(restore, b * n, dev)?;
        let full = full.index_select(&restore, 0)?.reshape((b, n, dd))?;
        let mut y = Tensor::cat(&[&cls, &full], 1)?.broadcast_add(&self.decoder_pos)?;
        for block in &self.decoder_blocks {
            y = block.forward(&y)?;
        }
        let y = self.decoder_norm.forward(&y)?;
        let y = self.decoder_pred.forward(&y)?;
        Ok(y.narrow(1, 1, n)?)
    }

    /// Patch rows of `(B, C, H, W)` images.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        patchify_tensor(images, self.config.patch_size)
    }

    /// Training objective for a batch of images and masks.
    pub fn loss(&self, images: &Tensor, masks: &[MaskPattern]) -> Result<Tensor> {
        let target = self.patchify(images)?;
        let pred = self.forward(&target, masks)?;
        let mask = mask_tensor(masks, self.dtype())?;
        reconstruction_loss(&pred, &target, &mask, self.config.normalize_pixel_loss)
    }

    /// Raw decoder predictions for one image under each mask, as patch grids.
    pub fn predict(&self, image: &Image, masks: &[MaskPattern]) -> Result<Vec<PatchGrid>> {
        let batch: Vec<&Image> = vec![image; masks.len()];
        let x = images_to_tensor(&batch, self.dtype())?;
        let pred = self.forward(&self.patchify(&x)?, masks)?;
        let grid = self.config.encoder().grid();
        let pred = pred.to_dtype(DType::F32)?;
        (0..masks.len())
            .map(|k| {
                Ok(PatchGrid {
                    patch_size: self.config.patch_size,
                    channels: self.config.channels,
                    grid,
                    data: pred.get(k)?.flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }
}

/// `(B, N)` tensor with 1 on masked patches.
pub fn mask_tensor(masks: &[MaskPattern], dtype: DType) -> Result<Tensor> {
    let n = masks.first().map(MaskPattern::len).unwrap_or(0);
    let flat: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.flags().iter().map(|&f| f as u8 as f32))
        .collect();
    Ok(Tensor::from_vec(flat, (masks.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}
