use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_image, ImagePrediction, RegionPrediction, Thresholds, Trigger};
use super::layout::HeadLayout;
use super::loss::masked_multitask_loss;
use super::region::{crop_region, propose_regions, CropConfig, RegionBox, RegionProposer};
use crate::datamodel::{BoxXywh, Image, ImageSource, LabeledTarget, ManifestEntry, SplitPlan};
use crate::error::{Error, Result};
use crate::finetune::{prepare_image, task_metrics, BackboneConfig, ConvConfig, GlobalPool, Model, ModelSpec, TaskMetrics, TestReport};
use crate::finetune::{summarize, write_json};
use crate::mae::images_to_tensor;
use crate::nn::{layerwise_scales, AdamW, CosineSchedule, VitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiheadConfig {
    pub base_lr: f64,
    pub layerwise_lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub backbone: BackboneConfig,
    pub init_checkpoint: Option<PathBuf>,
    pub crop: CropConfig,
    /// Random crop, rotation and jitter on training regions.
    pub augment: bool,
    pub trigger: Trigger,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for MultiheadConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-5,
            layerwise_lr_decay: 0.75,
            batch_size: 64,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            warmup_ratio: 0.1,
            epochs: 30,
            backbone: BackboneConfig::Vit(VitConfig {
                image_size: [224, 224],
                patch_size: 16,
                channels: 3,
                embed_dim: 1024,
                depth: 24,
                heads: 16,
                mlp_ratio: 4,
            }),
            init_checkpoint: None,
            crop: CropConfig::default(),
            augment: true,
            trigger: Trigger::default(),
            seed: 0,
            ci_level: 0.95,
        }
    }
}

impl MultiheadConfig {
    /// Small convolutional backbone on 48×48 grayscale crops. Crop
    /// augmentation is off: at this data size it slowed convergence more
    /// than it helped.
    pub fn toy() -> Self {
        Self {
            base_lr: 2e-3,
            layerwise_lr_decay: 1.0,
            batch_size: 32,
            weight_decay: 1e-4,
            epochs: 12,
            backbone: BackboneConfig::Conv(ConvConfig {
                image_size: [48, 48],
                channels: 1,
                widths: vec![16, 32, 64],
                pool: GlobalPool::Flatten,
            }),
            crop: CropConfig {
                out_size: 48,
                ..CropConfig::default()
            },
            augment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("learning rate, batch size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.crop.ior_floor) || self.crop.out_size == 0 {
            return Err(Error::Config("IoR floor must lie in [0, 1] and crop size be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup ratio must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training unit: a region of an image with per-head labels in layout
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionItem {
    pub id: String,
    pub bbox: BoxXywh,
    pub targets: Vec<LabeledTarget>,
}

/// Expands entries into their annotated regions (or the whole image when an
/// entry has none). The location head takes the region's class; other heads
/// take the image label, and a missing label counts as masked.
pub fn region_items(source: &dyn ImageSource, ids: &[String], layout: &HeadLayout) -> Result<Vec<RegionItem>> {
    let index = source.manifest().index_by_id();
    let loc = layout.index_of(super::layout::HEAD_LOCATION);
    let mut out = Vec::new();
    for id in ids {
        let entry: &ManifestEntry = index
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("split references unknown entry {id}")))?;
        let base: Vec<LabeledTarget> = layout
            .groups
            .iter()
            .map(|g| entry.label(&g.label_key).copied().unwrap_or_else(LabeledTarget::masked))
            .collect();
        if entry.regions.is_empty() {
            let img = source.load(id)?;
            out.push(RegionItem {
                id: id.clone(),
                bbox: RegionBox::whole(&img).bbox,
                targets: base,
            });
            continue;
        }
        for r in &entry.regions {
            let mut targets = base.clone();
            if let Some(h) = loc {
                targets[h] = LabeledTarget::class(r.location_class);
            }
            out.push(RegionItem {
                id: id.clone(),
                bbox: r.bbox,
                targets,
            });
        }
    }
    Ok(out)
}

fn tight_crops(source: &dyn ImageSource, items: &[RegionItem], crop: &CropConfig, shape: (usize, usize, usize)) -> Result<Vec<Image>> {
    items
        .iter()
        .map(|it| prepare_image(&crop_region(&source.load(&it.id)?, &it.bbox, false, 0, crop)?.image, shape))
        .collect()
}

/// Raw logits, one row per image.
pub fn predict_logits(model: &Model, images: &[Image], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let y = model.forward(&images_to_tensor(&refs, model.params().dtype())?)?;
        let rows: Vec<Vec<f32>> = y.to_dtype(DType::F32)?.to_vec2()?;
        out.extend(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadStatus {
    Trained,
    /// No unmasked label anywhere in the training data.
    Untrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub status: HeadStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TaskMetrics>,
    /// Why metrics are missing, when they are.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-head metrics over the unmasked labels of each head.
pub fn head_metrics(
    layout: &HeadLayout,
    logits: &[Vec<f64>],
    items: &[RegionItem],
    trained: &[bool],
) -> Result<BTreeMap<String, HeadMetrics>> {
    let probs = logits
        .iter()
        .map(|l| layout.probabilities(l))
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for (h, g) in layout.groups.iter().enumerate() {
        let status = if trained[h] { HeadStatus::Trained } else { HeadStatus::Untrained };
        let keep: Vec<usize> = (0..items.len()).filter(|&i| !items[i].targets[h].is_masked()).collect();
        let outputs: Vec<Vec<f64>> = keep.iter().map(|&i| probs[i][h].clone()).collect();
        let targets: Vec<f64> = keep.iter().map(|&i| items[i].targets[h].y).collect();
        let (metrics, note) = match task_metrics(&g.task(), &outputs, &targets) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.insert(g.name.clone(), HeadMetrics { status, metrics, note });
    }
    Ok(out)
}

/// Unweighted mean AUROC over trained heads whose AUROC is defined.
pub fn mean_auroc(heads: &BTreeMap<String, HeadMetrics>) -> f64 {
    let v: Vec<f64> = heads
        .values()
        .filter(|h| h.status == HeadStatus::Trained)
        .filter_map(|h| h.metrics.as_ref().and_then(|m| m.auroc))
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiheadEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_mean_auroc: f64,
    pub val: BTreeMap<String, HeadMetrics>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiheadFold {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub checkpoint: PathBuf,
    pub train_regions: usize,
    pub val_regions: usize,
    pub history: Vec<MultiheadEpoch>,
    /// Best checkpoint on the hold-out test regions.
    pub test: BTreeMap<String, HeadMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiheadResult {
    pub layout: HeadLayout,
    pub folds: Vec<MultiheadFold>,
    /// Across-fold test summary per trained head with defined metrics.
    pub test: BTreeMap<String, TestReport>,
    pub untrained: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MultiheadResult {
    pub fn test_auroc(&self, head: &str) -> Option<f64> {
        self.test.get(head).and_then(|r| r.mean("auroc"))
    }
}

/// Cross-validated training of the shared-output classifier on region
/// crops, with best-epoch selection by mean validation AUROC and evaluation
/// of every fold's checkpoint on the plan's hold-out test set.
pub fn train_multihead(source: &dyn ImageSource, plan: &SplitPlan, config: &MultiheadConfig, out: &Path) -> Result<MultiheadResult> {
    config.validate()?;
    if plan.folds.is_empty() {
        return Err(Error::Config("split plan has no folds".into()));
    }
    let layout = HeadLayout::standard();
    let shape = config.backbone.input_shape();
    let test_items = region_items(source, &plan.test_ids, &layout)?;
    let test_images = tight_crops(source, &test_items, &config.crop, shape)?;

    let all_train: Vec<String> = {
        let mut ids: Vec<String> = plan.folds.iter().flat_map(|f| f.train_ids.iter().chain(&f.val_ids).cloned()).collect();
        ids.sort();
        ids.dedup();
        ids
    };
    let pool = region_items(source, &all_train, &layout)?;
    let trained: Vec<bool> = (0..layout.groups.len())
        .map(|h| pool.iter().any(|it| !it.targets[h].is_masked()))
        .collect();
    let untrained: Vec<String> = layout
        .groups
        .iter()
        .zip(&trained)
        .filter(|(_, t)| !**t)
        .map(|(g, _)| g.name.clone())
        .collect();
    for name in &untrained {
        log::warn!("head {name} has no unmasked labels and stays untrained");
    }

    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let train = region_items(source, &fold.train_ids, &layout)?;
        let val = region_items(source, &fold.val_ids, &layout)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyScope(format!("fold {i} has no train or validation regions")));
        }
        let dir = out.join(format!("fold{i}"));
        let mut result = train_fold(source, &layout, config, i, &train, &val, &trained, &dir)?;
        let model = Model::load(&result.checkpoint)?;
        let logits = predict_logits(&model, &test_images, config.batch_size)?;
        result.test = head_metrics(&layout, &logits, &test_items, &trained)?;
        write_json(&dir.join("report.json"), &result)?;
        folds.push(result);
    }

    let mut test = BTreeMap::new();
    let mut warnings = Vec::new();
    for (h, g) in layout.groups.iter().enumerate() {
        if !trained[h] {
            continue;
        }
        let per_fold: Vec<TaskMetrics> = folds.iter().filter_map(|f| f.test[&g.name].metrics.clone()).collect();
        if per_fold.len() < folds.len() {
            warnings.push(format!("head {}: test metrics undefined on some folds", g.name));
        }
        if per_fold.is_empty() {
            continue;
        }
        test.insert(g.name.clone(), summarize(&g.task(), per_fold, config.ci_level)?);
    }
    let result = MultiheadResult {
        layout,
        folds,
        test,
        untrained,
        warnings,
    };
    write_json(&out.join("multihead.json"), &result)?;
    Ok(result)
}

/// Checkpoint `extra` block: the training configuration plus the trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiheadMeta {
    pub config: MultiheadConfig,
    pub untrained: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn train_fold(
    source: &dyn ImageSource,
    layout: &HeadLayout,
    config: &MultiheadConfig,
    fold: usize,
    train: &[RegionItem],
    val: &[RegionItem],
    trained: &[bool],
    dir: &Path,
) -> Result<MultiheadFold> {
    let shape = config.backbone.input_shape();
    let mut cache: BTreeMap<String, Image> = BTreeMap::new();
    for it in train {
        if !cache.contains_key(&it.id) {
            cache.insert(it.id.clone(), source.load(&it.id)?);
        }
    }
    let val_images = tight_crops(source, val, &config.crop, shape)?;
    let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64);
    let backbone = match &config.init_checkpoint {
        Some(d) => BackboneConfig::from_mae_checkpoint(d, Some(&config.backbone))?,
        None => config.backbone.clone(),
    };
    let spec = ModelSpec {
        backbone,
        outputs: layout.total(),
        target_norm: None,
        head: serde_json::to_value(layout)?,
    };
    let model = Model::new(spec, seed, DType::F32)?;
    if let Some(d) = &config.init_checkpoint {
        model.init_backbone(d)?;
    }
    let extra = serde_json::to_value(MultiheadMeta {
        config: config.clone(),
        untrained: layout
            .groups
            .iter()
            .zip(trained)
            .filter(|(_, t)| !**t)
            .map(|(g, _)| g.name.clone())
            .collect(),
    })?;

    let mut opt = AdamW::new(model.params(), config.beta1, config.beta2, config.weight_decay)?
        .with_layer_scale(layerwise_scales(model.backbone().decay_layers(), config.layerwise_lr_decay));
    let per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.base_lr, config.warmup_ratio, per_epoch * config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d75_6c74_6900);

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join("best.ckpt");
    let hist_path = dir.join("history.jsonl");
    let mut hist_file = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    let mut history: Vec<MultiheadEpoch> = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut best = f64::NEG_INFINITY;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let views = batch
                .iter()
                .map(|&i| {
                    let it = &train[i];
                    let view_seed = seed ^ ((epoch as u64) << 32) ^ i as u64;
                    let crop = crop_region(&cache[&it.id], &it.bbox, config.augment, view_seed, &config.crop)?;
                    prepare_image(&crop.image, shape)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs, DType::F32)?;
            let targets: Vec<Vec<LabeledTarget>> = batch.iter().map(|&i| train[i].targets.clone()).collect();
            let loss = masked_multitask_loss(&model.forward(&x)?, &targets, layout)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, value });
            }
            lr = schedule.lr(step);
            let grads = loss.backward()?;
            opt.step(model.params(), &grads, lr)?;
            sum += value * batch.len() as f64;
            step += 1;
        }
        let logits = predict_logits(&model, &val_images, config.batch_size)?;
        let val_heads = head_metrics(layout, &logits, val, trained)?;
        let value = mean_auroc(&val_heads);
        let selected = history.is_empty() || value > best;
        if selected {
            best = value;
            model.save(&ckpt, step, epoch, Some(value), extra.clone())?;
        }
        log::info!("fold {fold} epoch {epoch}: loss {:.5} val mean auroc {value:.4}", sum / train.len() as f64);
        let record = MultiheadEpoch {
            epoch,
            train_loss: sum / train.len() as f64,
            lr,
            val_mean_auroc: value,
            val: val_heads,
            selected,
        };
        writeln!(hist_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&hist_path, e))?;
        history.push(record);
    }
    let best_idx = history.iter().rposition(|h| h.selected).unwrap_or(0);
    Ok(MultiheadFold {
        fold,
        best_epoch: best_idx + 1,
        best_metric: history[best_idx].val_mean_auroc,
        checkpoint: ckpt,
        train_regions: train.len(),
        val_regions: val.len(),
        history,
        test: BTreeMap::new(),
    })
}

/// A trained multi-head checkpoint ready for region-guided inference.
pub struct MultiheadModel {
    pub model: Model,
    pub layout: HeadLayout,
    pub crop: CropConfig,
    pub trigger: Trigger,
}

impl MultiheadModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let (model, meta) = Model::load_with_meta(dir)?;
        let layout: HeadLayout = serde_json::from_value(model.spec.head.clone())
            .map_err(|_| Error::Checkpoint(format!("{} is not a multi-head checkpoint", dir.display())))?;
        layout.validate()?;
        let (crop, trigger) = match serde_json::from_value::<MultiheadMeta>(meta.extra) {
            Ok(m) => (m.config.crop, m.config.trigger),
            Err(_) => (CropConfig::default(), Trigger::default()),
        };
        Ok(Self {
            model,
            layout,
            crop,
            trigger,
        })
    }

    pub fn predict_regions(&self, image: &Image, regions: &[RegionBox]) -> Result<Vec<RegionPrediction>> {
        let shape = self.model.input_shape();
        let crops = regions
            .iter()
            .map(|r| prepare_image(&crop_region(image, &r.bbox, false, 0, &self.crop)?.image, shape))
            .collect::<Result<Vec<_>>>()?;
        let logits = predict_logits(&self.model, &crops, 16)?;
        regions
            .iter()
            .zip(&logits)
            .map(|(r, l)| RegionPrediction::from_logits(*r, l, &self.layout))
            .collect()
    }
}

/// Proposes regions, classifies each and aggregates. Proposal warnings are
/// returned alongside the prediction.
pub fn predict_image(
    model: &MultiheadModel,
    image: &Image,
    id: Option<&str>,
    proposer: &dyn RegionProposer,
    thresholds: Thresholds,
) -> Result<(ImagePrediction, Vec<String>)> {
    let (regions, warnings) = propose_regions(image, id, proposer);
    let preds = model.predict_regions(image, &regions)?;
    Ok((aggregate_image(preds, thresholds)?, warnings))
}
