use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::MaeConfig;
use super::model::{images_to_tensor, MaeModel};
use super::patch::{sample_mask_with, unpatchify, MaskPattern};
use crate::checkpoint::save_checkpoint;
use crate::datamodel::{Image, ImageSource};
use crate::error::{Error, Result};
use crate::nn::{AdamW, CosineSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
}

/// Torchvision-style random resized crop: area fraction uniform in
/// `area`, log-uniform aspect ratio in [3/4, 4/3], falling back to the
/// full image.
pub fn random_resized_crop(img: &Image, area: [f64; 2], out: (usize, usize), rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height() as f64, img.width() as f64);
    for _ in 0..10 {
        let target = h * w * rng.gen_range(area[0]..=area[1]);
        let log_r = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let r = log_r.exp();
        let cw = (target * r).sqrt().round();
        let ch = (target / r).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let top = rng.gen_range(0.0..=(h - ch)).floor();
            let left = rng.gen_range(0.0..=(w - cw)).floor();
            return img.crop_resize(top, left, ch, cw, out.0, out.1);
        }
    }
    img.crop_resize(0.0, 0.0, h, w, out.0, out.1)
}

fn write_history(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in steps {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Self-supervised pretraining over every image in `source`. Writes
/// `best/` (lowest epoch-mean loss), `last/` and `history.jsonl` under
/// `out`.
pub fn pretrain(source: &dyn ImageSource, config: &MaeConfig, out: &Path) -> Result<PretrainReport> {
    config.validate()?;
    let ids: Vec<String> = source.manifest().entries.iter().map(|e| e.id.clone()).collect();
    if ids.is_empty() {
        return Err(Error::EmptyScope("pretraining corpus has no images".into()));
    }
    let images = ids
        .iter()
        .map(|id| Ok(source.load(id)?.with_channels(config.channels)))
        .collect::<Result<Vec<_>>>()?;

    let model = MaeModel::new(config, DType::F32)?;
    let mut opt = AdamW::new(model.params(), config.optimizer.beta1, config.optimizer.beta2, config.optimizer.weight_decay)?;
    let per_epoch = images.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.optimizer.base_lr, config.warmup_ratio, per_epoch * config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d61_655f_7472_6169);
    let n_patches = config.num_patches();
    let out_hw = (config.image_size[0], config.image_size[1]);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let best_dir = out.join("best");
    let last_dir = out.join("last");
    save_checkpoint(&last_dir, &model.meta(0, 0, None)?, model.params())?;
    save_checkpoint(&best_dir, &model.meta(0, 0, None)?, model.params())?;

    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let views: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    let v = random_resized_crop(&images[i], config.augmentation.crop_area, out_hw, &mut rng);
                    if config.augmentation.horizontal_flip && rng.gen_bool(0.5) {
                        v.flip_horizontal()
                    } else {
                        v
                    }
                })
                .collect();
            let masks = (0..views.len())
                .map(|_| sample_mask_with(n_patches, config.mask_ratio, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs, DType::F32)?;
            let loss = model.loss(&x, &masks)?;
            let value = loss.to_scalar::<f32>()? as f64;
            let step = steps.len();
            if !value.is_finite() {
                write_history(&out.join("history.jsonl"), &steps)?;
                return Err(Error::NonFiniteLoss { step, value });
            }
            let lr = schedule.lr(step);
            let grads = loss.backward()?;
            opt.step(model.params(), &grads, lr)?;
            steps.push(StepRecord { step, epoch, loss: value, lr });
            sum += value;
        }
        let mean = sum / per_epoch as f64;
        epoch_losses.push(mean);
        log::info!("pretrain epoch {epoch}: mean loss {mean:.6}");
        let meta = model.meta(steps.len(), epoch + 1, Some(mean))?;
        save_checkpoint(&last_dir, &meta, model.params())?;
        if mean < best {
            best = mean;
            save_checkpoint(&best_dir, &meta, model.params())?;
        }
    }
    write_history(&out.join("history.jsonl"), &steps)?;
    Ok(PretrainReport {
        steps,
        epoch_losses,
        best_dir,
        last_dir,
    })
}

/// Overlays model predictions on masked patches; visible patches keep the
/// original pixels bit for bit.
pub fn composite(original: &Image, predicted: &Image, mask: &MaskPattern, patch: usize) -> Result<Image> {
    if !original.same_shape(predicted) {
        return Err(Error::Shape("prediction and original differ in shape".into()));
    }
    let (h, w, c) = (original.height(), original.width(), original.channels());
    let cols = w / patch;
    if mask.len() != (h / patch) * cols {
        return Err(Error::Shape("mask does not match the patch grid".into()));
    }
    let mut out = original.clone();
    let src = predicted.data();
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            if mask.is_masked((i / patch) * cols + j / patch) {
                let k = (i * w + j) * c;
                dst[k..k + c].copy_from_slice(&src[k..k + c]);
            }
        }
    }
    Ok(out)
}

/// Reconstructs `image` under `mask`: original pixels on visible patches,
/// decoder output on masked ones.
pub fn reconstruct(image: &Image, mask: &MaskPattern, model: &MaeModel) -> Result<Image> {
    let cfg = &model.config;
    if image.height() != cfg.image_size[0] || image.width() != cfg.image_size[1] || image.channels() != cfg.channels {
        return Err(Error::Shape(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size[0],
            cfg.image_size[1],
            cfg.channels
        )));
    }
    if mask.len() != cfg.num_patches() {
        return Err(Error::Shape(format!("mask over {} patches, model has {}", mask.len(), cfg.num_patches())));
    }
    if mask.masked_count() == 0 {
        return Ok(image.clone());
    }
    let pred = model.predict(image, std::slice::from_ref(mask))?;
    let pred = unpatchify(&pred[0])?;
    composite(image, &pred, mask, cfg.patch_size)
}
