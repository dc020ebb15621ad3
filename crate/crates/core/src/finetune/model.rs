use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_kind, load_params, read_meta, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MAE_KIND};
use crate::nn::{Linear, Params, VitConfig, VitEncoder};

/// Anything that maps `(B, C, H, W)` images to `(B, D)` embeddings.
pub trait Backbone: Send + Sync {
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
    fn embed_dim(&self) -> usize;
    /// Layer count for layer-wise learning-rate decay, including the output
    /// layer where a head is attached.
    fn decay_layers(&self) -> usize;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPool {
    Mean,
    /// Small local findings survive max pooling; a spatial mean dilutes them
    /// with background.
    #[default]
    Max,
    /// Keeps the final feature map's layout, so position is available to
    /// the head.
    Flatten,
}

/// Small convolutional baseline: 3×3 conv, ReLU and 2×2 max-pool per stage,
/// then global pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub image_size: [usize; 2],
    pub channels: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub pool: GlobalPool,
}

struct ConvStage {
    weight: Tensor,
    bias: Tensor,
}

pub struct ConvBackbone {
    stages: Vec<ConvStage>,
    dim: usize,
    pool: GlobalPool,
}

impl ConvBackbone {
    pub fn new(p: &mut Params, prefix: &str, config: &ConvConfig) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(Error::Config("convolutional backbone needs at least one stage".into()));
        }
        let mut stages = Vec::new();
        let mut c_in = config.channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let weight = p.trunc_normal(&format!("{prefix}conv{i}.weight"), &[c_out, c_in, 3, 3], std, i, true)?;
            let bias = p.constant(&format!("{prefix}conv{i}.bias"), &[c_out], 0.0, i)?;
            stages.push(ConvStage { weight, bias });
            c_in = c_out;
        }
        let [mut h, mut w] = config.image_size;
        for _ in &config.widths {
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
        }
        let dim = match config.pool {
            GlobalPool::Flatten => c_in * h * w,
            _ => c_in,
        };
        Ok(Self {
            stages,
            dim,
            pool: config.pool,
        })
    }
}

impl Backbone for ConvBackbone {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for s in &self.stages {
            x = x.conv2d(&s.weight, 1, 1, 1, 1)?;
            x = x.broadcast_add(&s.bias.reshape((1, (), 1, 1))?)?.relu()?;
            let (_, _, h, w) = x.dims4()?;
            if h >= 2 && w >= 2 {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(match self.pool {
            GlobalPool::Mean => x.mean(3)?.mean(2)?,
            GlobalPool::Max => x.max(3)?.max(2)?,
            GlobalPool::Flatten => x.flatten_from(1)?,
        })
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn decay_layers(&self) -> usize {
        self.stages.len() + 1
    }
}

pub struct VitBackbone {
    encoder: VitEncoder,
}

impl VitBackbone {
    pub fn new(p: &mut Params, config: &VitConfig) -> Result<Self> {
        Ok(Self {
            encoder: VitEncoder::new(p, "encoder.", config)?,
        })
    }
}

impl Backbone for VitBackbone {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.pooled(images)
    }

    fn embed_dim(&self) -> usize {
        self.encoder.config.embed_dim
    }

    fn decay_layers(&self) -> usize {
        self.encoder.config.decay_layers()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackboneConfig {
    Vit(VitConfig),
    Conv(ConvConfig),
}

impl BackboneConfig {
    /// `(channels, height, width)` expected by the backbone.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            BackboneConfig::Vit(v) => (v.channels, v.image_size[0], v.image_size[1]),
            BackboneConfig::Conv(c) => (c.channels, c.image_size[0], c.image_size[1]),
        }
    }

    pub fn build(&self, p: &mut Params) -> Result<Box<dyn Backbone>> {
        Ok(match self {
            BackboneConfig::Vit(v) => Box::new(VitBackbone::new(p, v)?),
            BackboneConfig::Conv(c) => Box::new(ConvBackbone::new(p, "backbone.", c)?),
        })
    }

    /// Takes the encoder geometry from a pretraining checkpoint, rejecting a
    /// configured transformer whose embedding width disagrees.
    pub fn from_mae_checkpoint(dir: &Path, configured: Option<&BackboneConfig>) -> Result<Self> {
        let meta = read_meta(dir)?;
        expect_kind(&meta, MAE_KIND)?;
        let mae: MaeConfig = serde_json::from_value(meta.config)
            .map_err(|e| Error::Checkpoint(format!("bad mae config: {e}")))?;
        let enc = mae.encoder();
        match configured {
            Some(BackboneConfig::Vit(v)) if v.embed_dim != enc.embed_dim => Err(Error::Config(format!(
                "embedding-dimension mismatch: backbone expects {}, checkpoint provides {}",
                v.embed_dim, enc.embed_dim
            ))),
            Some(BackboneConfig::Conv(_)) => Err(Error::Config(
                "a transformer checkpoint cannot initialize a convolutional backbone".into(),
            )),
            _ => Ok(BackboneConfig::Vit(enc)),
        }
    }
}

/// Everything needed to rebuild a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub outputs: usize,
    /// `(mean, std)` used to standardize regression targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_norm: Option<(f64, f64)>,
    /// Free-form description of the head layout (task spec or head groups).
    #[serde(default)]
    pub head: serde_json::Value,
}

pub const MODEL_KIND: &str = "classifier";

/// Backbone plus a linear head.
pub struct Model {
    pub spec: ModelSpec,
    params: Params,
    backbone: Box<dyn Backbone>,
    head: Linear,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64, dtype: DType) -> Result<Self> {
        let mut params = Params::new(seed, dtype);
        let backbone = spec.backbone.build(&mut params)?;
        let top = backbone.decay_layers() - 1;
        let head = Linear::with_std(&mut params, "head", backbone.embed_dim(), spec.outputs, top, 2e-5)?;
        Ok(Self {
            spec,
            params,
            backbone,
            head,
        })
    }

    /// Copies matching backbone weights from a checkpoint directory.
    pub fn init_backbone(&self, dir: &Path) -> Result<()> {
        let skipped = load_params(dir, &self.params, false)?;
        let loaded = self.params.len() - skipped.len();
        if loaded == 0 {
            return Err(Error::Checkpoint(format!(
                "{} shares no parameters with this backbone",
                dir.display()
            )));
        }
        log::info!("initialized {loaded} tensors from {}", dir.display());
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.spec.backbone.input_shape()
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.embed(images)
    }

    /// Raw outputs `(B, outputs)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.backbone.embed(images)?)
    }

    /// Writes the checkpoint; `extra` carries caller provenance such as the
    /// training configuration.
    pub fn save(&self, dir: &Path, step: usize, epoch: usize, metric: Option<f64>, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            kind: MODEL_KIND.into(),
            config: serde_json::to_value(&self.spec)?,
            step,
            epoch,
            metric,
            extra,
        };
        save_checkpoint(dir, &meta, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::load_with_meta(dir)?.0)
    }

    pub fn load_with_meta(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta = read_meta(dir)?;
        expect_kind(&meta, MODEL_KIND)?;
        let spec: ModelSpec = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad model spec: {e}")))?;
        let model = Self::new(spec, 0, DType::F32)?;
        load_params(dir, &model.params, true)?;
        Ok((model, meta))
    }
}

