use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BackboneConfig, ConvConfig, GlobalPool, Model, ModelSpec};
use super::registry::{LossKind, SelectionMetric, TaskSpec};
use crate::datamodel::{subsample_training, DatasetManifest, Image, ImageSource, LabeledTarget, SplitPlan, TaskKind};
use crate::error::{Error, Result};
use crate::evalstat::{argmax, auroc, auroc_ovr, classification_metrics, regression_metrics, MetricReport};
use crate::mae::images_to_tensor;
use crate::nn::{layerwise_scales, log_softmax_last, softmax_last, AdamW, CosineSchedule, VitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub base_lr: f64,
    pub layerwise_lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub backbone: BackboneConfig,
    /// Pretraining checkpoint whose encoder initializes the backbone.
    pub init_checkpoint: Option<PathBuf>,
    pub horizontal_flip: bool,
    pub seed: u64,
    /// Confidence level of the across-fold intervals.
    pub ci_level: f64,
}

impl Default for FinetuneConfig {
    /// ViT-L/16 recipe for transformer backbones.
    fn default() -> Self {
        Self {
            base_lr: 5e-5,
            layerwise_lr_decay: 0.75,
            batch_size: 64,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            warmup_ratio: 0.1,
            epochs: 50,
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
            horizontal_flip: true,
            seed: 0,
            ci_level: 0.95,
        }
    }
}

impl FinetuneConfig {
    /// Convolutional baseline recipe: no layer-wise decay.
    pub fn conv_baseline() -> Self {
        Self {
            base_lr: 5e-4,
            layerwise_lr_decay: 1.0,
            weight_decay: 1e-4,
            backbone: BackboneConfig::Conv(ConvConfig {
                image_size: [224, 224],
                channels: 3,
                widths: vec![32, 64, 128, 256],
                pool: GlobalPool::Max,
            }),
            ..Self::default()
        }
    }

    /// Two-block transformer on 64×64 grayscale, matching the toy autoencoder.
    pub fn toy() -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            backbone: BackboneConfig::Vit(VitConfig {
                image_size: [64, 64],
                patch_size: 8,
                channels: 1,
                embed_dim: 64,
                depth: 2,
                heads: 4,
                mlp_ratio: 4,
            }),
            ..Self::default()
        }
    }

    pub fn toy_conv() -> Self {
        Self {
            base_lr: 2e-3,
            layerwise_lr_decay: 1.0,
            batch_size: 32,
            weight_decay: 1e-4,
            epochs: 10,
            backbone: BackboneConfig::Conv(ConvConfig {
                image_size: [64, 64],
                channels: 1,
                widths: vec![16, 32, 64],
                pool: GlobalPool::Max,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.layerwise_lr_decay > 0.0 && self.layerwise_lr_decay <= 1.0) {
            return Err(Error::Config("base_lr must be positive and layerwise_lr_decay in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if let BackboneConfig::Vit(v) = &self.backbone {
            v.validate()?;
        }
        Ok(())
    }
}

/// Index of the best value under `metric`; the earliest epoch wins ties and
/// NaN entries never win.
pub fn select_epoch(values: &[f64], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if !metric.better(v, values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Training loss for a batch of raw outputs `(B, arity)`. `targets` holds
/// class indices for softmax tasks and 0/1 or standardized reals otherwise.
pub fn task_loss(loss: LossKind, outputs: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let b = outputs.dim(0)?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for {b} outputs", targets.len())));
    }
    let dev = outputs.device();
    Ok(match loss {
        LossKind::SigmoidBce => {
            let x = outputs.flatten_all()?;
            let y = Tensor::new(targets, dev)?.to_dtype(x.dtype())?;
            // max(x, 0) - x·y + log(1 + e^{-|x|})
            let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
            ((x.relu()? - (&x * &y)?)? + soft)?.mean_all()?
        }
        LossKind::SoftmaxCe => {
            let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
            let idx = Tensor::from_vec(idx, (b, 1), dev)?;
            log_softmax_last(outputs)?.gather(&idx, 1)?.mean_all()?.neg()?
        }
        LossKind::Mse => {
            let x = outputs.flatten_all()?;
            let y = Tensor::new(targets, dev)?.to_dtype(x.dtype())?;
            (x - y)?.sqr()?.mean_all()?
        }
    })
}

/// Resamples an image to the backbone's input shape.
pub fn prepare_image(img: &Image, shape: (usize, usize, usize)) -> Result<Image> {
    let (c, h, w) = shape;
    let img = img.with_channels(c);
    if img.height() == h && img.width() == w {
        Ok(img)
    } else {
        img.resize_bilinear(h, w)
    }
}

/// Per-image task outputs: `[P(positive)]`, class probabilities, or
/// `[prediction]` in label units.
pub fn predict_images(model: &Model, task: &TaskSpec, images: &[Image], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = images_to_tensor(&refs, model.params().dtype())?;
        let y = model.forward(&x)?;
        let y = match task.loss {
            LossKind::SigmoidBce => sigmoid(&y)?,
            LossKind::SoftmaxCe => softmax_last(&y)?,
            LossKind::Mse => y,
        };
        let rows: Vec<Vec<f32>> = y.to_dtype(DType::F32)?.to_vec2()?;
        for r in rows {
            let mut r: Vec<f64> = r.into_iter().map(f64::from).collect();
            if let (LossKind::Mse, Some((m, s))) = (task.loss, model.spec.target_norm) {
                r[0] = r[0] * s + m;
            }
            out.push(r);
        }
    }
    Ok(out)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<u64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TaskMetrics {
    pub fn selection_value(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Auroc => self.auroc.unwrap_or(f64::NAN),
            SelectionMetric::Mae => self.mae.unwrap_or(f64::NAN),
        }
    }

    fn named(&self) -> Vec<(&'static str, f64)> {
        [
            ("auroc", self.auroc),
            ("balanced_accuracy", self.balanced_accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("mae", self.mae),
            ("rmse", self.rmse),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Metrics of task outputs against labels. Binary decisions use 0.5,
/// multiclass decisions the arg-max.
pub fn task_metrics(task: &TaskSpec, outputs: &[Vec<f64>], targets: &[f64]) -> Result<TaskMetrics> {
    if outputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} outputs for {} targets", outputs.len(), targets.len())));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyScope(format!("no labelled samples for task {}", task.id)));
    }
    let mut m = TaskMetrics {
        n: outputs.len(),
        auroc: None,
        balanced_accuracy: None,
        precision: None,
        recall: None,
        f1: None,
        confusion: None,
        mae: None,
        rmse: None,
        warnings: Vec::new(),
    };
    let (predicted, labels, k) = match task.kind {
        TaskKind::Regression => {
            let preds: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let r = regression_metrics(&preds, targets)?;
            m.mae = Some(r.mae);
            m.rmse = Some(r.rmse);
            return Ok(m);
        }
        TaskKind::Binary => {
            let scores: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let labels: Vec<bool> = targets.iter().map(|&t| t >= 0.5).collect();
            m.auroc = Some(auroc(&scores, &labels)?);
            let predicted: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
            (predicted, labels.iter().map(|&l| usize::from(l)).collect::<Vec<_>>(), 2)
        }
        TaskKind::Multiclass { k } => {
            let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let (a, warnings) = auroc_ovr(outputs, &labels, k)?;
            m.auroc = Some(a);
            m.warnings.extend(warnings);
            (outputs.iter().map(|o| argmax(o)).collect(), labels, k)
        }
    };
    let c = classification_metrics(&predicted, &labels, k)?;
    m.balanced_accuracy = Some(c.balanced_accuracy);
    m.precision = Some(c.precision);
    m.recall = Some(c.recall);
    m.f1 = Some(c.f1);
    m.confusion = Some(c.confusion);
    m.warnings.extend(c.warnings);
    Ok(m)
}

/// Labelled `(id, target)` pairs for `ids`. Masked labels are skipped; an
/// entry without the label at all is an error.
fn labelled(manifest: &DatasetManifest, task: &TaskSpec, ids: &[String]) -> Result<Vec<(String, f64)>> {
    let index = manifest.index_by_id();
    let key = task.label_key();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = index
            .get(id.as_str())
            .ok_or_else(|| Error::Config(format!("split references unknown entry {id}")))?;
        let label: &LabeledTarget = entry.label(key).ok_or_else(|| Error::MissingLabel {
            task: key.to_string(),
            entry: id.clone(),
        })?;
        if !label.is_masked() {
            out.push((id.clone(), label.y));
        }
    }
    Ok(out)
}

fn distinct_classes(targets: &[f64]) -> usize {
    let mut seen: Vec<i64> = targets.iter().map(|&t| t.round() as i64).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val: TaskMetrics,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub checkpoint: PathBuf,
    pub train_size: usize,
    pub val_size: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub task: TaskSpec,
    pub selection: SelectionMetric,
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn checkpoints(&self) -> Vec<PathBuf> {
        self.folds.iter().map(|f| f.checkpoint.clone()).collect()
    }
}

/// `<root>/<task>/<timestamp>`.
pub fn run_dir(root: &Path, task: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f").to_string();
    root.join(task).join(stamp)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_prepared(source: &dyn ImageSource, ids: &[(String, f64)], shape: (usize, usize, usize)) -> Result<Vec<Image>> {
    ids.iter().map(|(id, _)| prepare_image(&source.load(id)?, shape)).collect()
}

/// Builds a freshly initialized model for `task`, optionally seeding the
/// backbone from a pretraining checkpoint.
pub fn attach_head(config: &FinetuneConfig, task: &TaskSpec, target_norm: Option<(f64, f64)>, seed: u64) -> Result<Model> {
    let backbone = match &config.init_checkpoint {
        Some(dir) => BackboneConfig::from_mae_checkpoint(dir, Some(&config.backbone))?,
        None => config.backbone.clone(),
    };
    let spec = ModelSpec {
        backbone,
        outputs: task.arity(),
        target_norm,
        head: serde_json::to_value(task)?,
    };
    let model = Model::new(spec, seed, DType::F32)?;
    if let Some(dir) = &config.init_checkpoint {
        model.init_backbone(dir)?;
    }
    Ok(model)
}

/// Trains one model per fold with layer-wise learning-rate decay and keeps
/// the epoch with the best validation metric. Only train and validation ids
/// are read. Writes `fold{i}/history.jsonl`, `fold{i}/best.ckpt/` and
/// `fold{i}/report.json` under `out`.
pub fn finetune_cv(
    source: &dyn ImageSource,
    task: &TaskSpec,
    plan: &SplitPlan,
    config: &FinetuneConfig,
    out: &Path,
) -> Result<CvResult> {
    config.validate()?;
    task.validate()?;
    if plan.folds.is_empty() {
        return Err(Error::Config("split plan has no folds".into()));
    }
    let manifest = source.manifest();
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let train = labelled(manifest, task, &fold.train_ids)?;
        let val = labelled(manifest, task, &fold.val_ids)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyScope(format!("fold {i} has no labelled train or validation samples")));
        }
        if task.is_classification() {
            let val_t: Vec<f64> = val.iter().map(|v| v.1).collect();
            if distinct_classes(&val_t) < 2 {
                return Err(Error::AurocUndefined(format!(
                    "fold {i} validation set contains a single class"
                )));
            }
        }
        let dir = out.join(format!("fold{i}"));
        let result = train_fold(source, task, config, i, &train, &val, &dir)?;
        write_json(&dir.join("report.json"), &result)?;
        folds.push(result);
    }
    let cv = CvResult {
        task: task.clone(),
        selection: task.selection,
        folds,
    };
    write_json(&out.join("cv.json"), &cv)?;
    Ok(cv)
}

fn train_fold(
    source: &dyn ImageSource,
    task: &TaskSpec,
    config: &FinetuneConfig,
    fold: usize,
    train: &[(String, f64)],
    val: &[(String, f64)],
    dir: &Path,
) -> Result<FoldResult> {
    let shape = config.backbone.input_shape();
    let train_images = load_prepared(source, train, shape)?;
    let val_images = load_prepared(source, val, shape)?;
    let raw: Vec<f64> = train.iter().map(|t| t.1).collect();
    let val_targets: Vec<f64> = val.iter().map(|t| t.1).collect();

    let target_norm = (task.kind == TaskKind::Regression).then(|| {
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, if sd > 0.0 { sd } else { 1.0 })
    });
    let targets: Vec<f64> = match target_norm {
        Some((m, s)) => raw.iter().map(|v| (v - m) / s).collect(),
        None => raw,
    };
    if let TaskKind::Multiclass { k } = task.kind {
        if let Some(bad) = targets.iter().find(|&&t| t < 0.0 || t as usize >= k) {
            return Err(Error::Config(format!("class index {bad} outside 0..{k} for task {}", task.id)));
        }
    }

    let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64);
    let model = attach_head(config, task, target_norm, seed)?;
    let layers = model.backbone().decay_layers();
    let mut opt = AdamW::new(model.params(), config.beta1, config.beta2, config.weight_decay)?
        .with_layer_scale(layerwise_scales(layers, config.layerwise_lr_decay));
    let per_epoch = train_images.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.base_lr, config.warmup_ratio, per_epoch * config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6674_756e_6500);

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join("best.ckpt");
    let hist_path = dir.join("history.jsonl");
    let mut hist_file = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let views: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    if config.horizontal_flip && rng.gen_bool(0.5) {
                        train_images[i].flip_horizontal()
                    } else {
                        train_images[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs, DType::F32)?;
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let loss = task_loss(task.loss, &model.forward(&x)?, &y)?;
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
        let outputs = predict_images(&model, task, &val_images, config.batch_size)?;
        let val_metrics = task_metrics(task, &outputs, &val_targets)?;
        let value = val_metrics.selection_value(task.selection);
        let incumbent: Vec<f64> = history.iter().map(|h| h.val.selection_value(task.selection)).collect();
        let selected = match select_epoch(&incumbent, task.selection) {
            None => true,
            Some(b) => task.selection.better(value, incumbent[b]),
        };
        if selected {
            model.save(&ckpt, step, epoch, Some(value), serde_json::to_value(config)?)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / train_images.len() as f64,
            lr,
            val: val_metrics,
            selected,
        };
        log::info!(
            "fold {fold} epoch {epoch}: loss {:.5} val {} {:.4}",
            record.train_loss,
            task.selection.name(),
            value
        );
        writeln!(hist_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&hist_path, e))?;
        history.push(record);
    }
    let values: Vec<f64> = history.iter().map(|h| h.val.selection_value(task.selection)).collect();
    let best = select_epoch(&values, task.selection).unwrap_or(0);
    Ok(FoldResult {
        fold,
        best_epoch: best + 1,
        best_metric: values[best],
        checkpoint: ckpt,
        train_size: train.len(),
        val_size: val.len(),
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub task: String,
    pub per_fold: Vec<TaskMetrics>,
    /// Mean and confidence interval across folds, keyed by metric name.
    pub summary: BTreeMap<String, MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TestReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|r| r.mean)
    }
}

pub(crate) fn summarize(task: &TaskSpec, per_fold: Vec<TaskMetrics>, level: f64) -> Result<TestReport> {
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in &per_fold {
        for (k, v) in m.named() {
            by_name.entry(k.to_string()).or_default().push(v);
        }
    }
    let summary = by_name
        .into_iter()
        .map(|(k, v)| Ok((k.clone(), MetricReport::from_values(k, v, level)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut warnings: Vec<String> = per_fold.iter().flat_map(|m| m.warnings.iter().cloned()).collect();
    warnings.sort();
    warnings.dedup();
    Ok(TestReport {
        task: task.id.clone(),
        per_fold,
        summary,
        warnings,
    })
}

fn fold_outputs(
    source: &dyn ImageSource,
    checkpoints: &[PathBuf],
    task: &TaskSpec,
    items: &[(String, f64)],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to evaluate".into()));
    }
    let mut cached: Option<((usize, usize, usize), Vec<Image>)> = None;
    let mut out = Vec::with_capacity(checkpoints.len());
    for dir in checkpoints {
        let model = Model::load(dir)?;
        let shape = model.input_shape();
        if cached.as_ref().map(|c| c.0) != Some(shape) {
            cached = Some((shape, load_prepared(source, items, shape)?));
        }
        let images = &cached.as_ref().expect("populated above").1;
        out.push(predict_images(&model, task, images, 64)?);
    }
    Ok(out)
}

/// Evaluates every fold checkpoint on the plan's held-out test set and
/// summarizes each metric as mean with a Student-t interval across folds.
pub fn evaluate_test(
    source: &dyn ImageSource,
    checkpoints: &[PathBuf],
    plan: &SplitPlan,
    task: &TaskSpec,
    level: f64,
) -> Result<TestReport> {
    if plan.test_ids.is_empty() {
        return Err(Error::EmptyScope("test set is empty".into()));
    }
    let items = labelled(source.manifest(), task, &plan.test_ids)?;
    let targets: Vec<f64> = items.iter().map(|t| t.1).collect();
    let per_fold = fold_outputs(source, checkpoints, task, &items)?
        .iter()
        .map(|o| task_metrics(task, o, &targets))
        .collect::<Result<Vec<_>>>()?;
    summarize(task, per_fold, level)
}

/// [`evaluate_test`] split by a manifest field (`body_part`, `patient_id` or
/// any `meta` key); entries without the field are grouped under `other`.
/// Groups whose metrics are undefined are reported as warnings.
pub fn evaluate_test_grouped(
    source: &dyn ImageSource,
    checkpoints: &[PathBuf],
    plan: &SplitPlan,
    task: &TaskSpec,
    group_key: &str,
    level: f64,
) -> Result<(BTreeMap<String, TestReport>, Vec<String>)> {
    if plan.test_ids.is_empty() {
        return Err(Error::EmptyScope("test set is empty".into()));
    }
    let manifest = source.manifest();
    let items = labelled(manifest, task, &plan.test_ids)?;
    let index = manifest.index_by_id();
    let groups: Vec<String> = items
        .iter()
        .map(|(id, _)| index[id.as_str()].field(group_key).unwrap_or("other").to_string())
        .collect();
    let outputs = fold_outputs(source, checkpoints, task, &items)?;
    let mut names: Vec<&String> = groups.iter().collect();
    names.sort();
    names.dedup();
    let mut reports = BTreeMap::new();
    let mut warnings = Vec::new();
    for g in names {
        let member: Vec<usize> = (0..items.len()).filter(|&i| &groups[i] == g).collect();
        let targets: Vec<f64> = member.iter().map(|&i| items[i].1).collect();
        let per_fold: Result<Vec<TaskMetrics>> = outputs
            .iter()
            .map(|o| {
                let sub: Vec<Vec<f64>> = member.iter().map(|&i| o[i].clone()).collect();
                task_metrics(task, &sub, &targets)
            })
            .collect();
        match per_fold.and_then(|p| summarize(task, p, level)) {
            Ok(r) => {
                reports.insert(g.clone(), r);
            }
            Err(e) => warnings.push(format!("group {g}: {e}")),
        }
    }
    Ok((reports, warnings))
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.1, 0.2, 0.5, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub seed: u64,
    pub train_pool: usize,
    pub test_size: usize,
    /// Across-fold mean of the selection metric on the sweep point's test set.
    pub metric: f64,
    pub report: TestReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task: String,
    pub metric: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Metric values across seeds at `fraction`.
    pub fn at(&self, fraction: f64) -> Vec<f64> {
        self.points.iter().filter(|p| p.fraction == fraction).map(|p| p.metric).collect()
    }
}

/// Label-efficiency curve: for every `(fraction, seed)` the training pool is
/// subsampled, every fold fine-tuned and the selected checkpoints evaluated.
/// Each point runs under `out/f{fraction}-s{seed}`.
pub fn label_efficiency_sweep(
    source: &dyn ImageSource,
    task: &TaskSpec,
    plan: &SplitPlan,
    fractions: &[f64],
    seeds: &[u64],
    config: &FinetuneConfig,
    out: &Path,
) -> Result<SweepResult> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
    }
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction and one seed".into()));
    }
    let mut points = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let sub = subsample_training(source.manifest(), plan, fraction, seed)?;
            let cfg = FinetuneConfig {
                seed,
                ..config.clone()
            };
            let dir = out.join(format!("f{fraction}-s{seed}"));
            let cv = finetune_cv(source, task, &sub, &cfg, &dir)?;
            let report = evaluate_test(source, &cv.checkpoints(), &sub, task, config.ci_level)?;
            let metric = report.mean(task.selection.name()).unwrap_or(f64::NAN);
            log::info!("sweep fraction {fraction} seed {seed}: {} {metric:.4}", task.selection.name());
            points.push(SweepPoint {
                fraction,
                seed,
                train_pool: sub.pool_ids().len(),
                test_size: sub.test_ids.len(),
                metric,
                report,
            });
        }
    }
    let result = SweepResult {
        task: task.id.clone(),
        metric: task.selection.name().to_string(),
        points,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("sweep.json"), &result)?;
    Ok(result)
}
