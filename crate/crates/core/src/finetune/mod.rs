//! Supervised fine-tuning: task registry, backbones with a linear head,
//! cross-validated training with checkpoint selection, held-out evaluation
//! and label-efficiency sweeps.

mod model;
mod registry;
mod train;

pub(crate) use train::{summarize, write_json};

pub use model::{Backbone, BackboneConfig, ConvBackbone, ConvConfig, GlobalPool, Model, ModelSpec, VitBackbone, MODEL_KIND};
pub use registry::{lookup_task, register_builtin_tasks, resolve_task, LossKind, SelectionMetric, TaskSpec};
pub use train::{
    attach_head, evaluate_test, evaluate_test_grouped, finetune_cv, label_efficiency_sweep, predict_images,
    prepare_image, run_dir, select_epoch, task_loss, task_metrics, CvResult, EpochRecord, FinetuneConfig,
    FoldResult, SweepPoint, SweepResult, TaskMetrics, TestReport, DEFAULT_FRACTIONS,
};
