//! Region-guided multi-head classification: region proposal, IoR-constrained
//! cropping, a 38-way shared output with masked multi-task loss, and
//! image-level aggregation.

mod aggregate;
mod layout;
mod loss;
mod region;
mod train;

pub use aggregate::{aggregate_image, region_is_tumor, ImagePrediction, Malignancy, RegionPrediction, Thresholds, Trigger, FRACTURE_NORMAL};
pub use layout::{
    Activation, HeadGroup, HeadLayout, HEAD_ABNORMALITY, HEAD_FRACTURE, HEAD_IMPLANT, HEAD_LOCATION, HEAD_TUMOR_SUBTYPE,
    SUBTYPE_MALIGNANT, SUBTYPE_NORMAL,
};
pub use loss::masked_multitask_loss;
pub use region::{
    crop_region, ior, propose_regions, CropConfig, Detection, DetectionClass, DetectionProposer, GroundTruthProposer,
    RegionBox, RegionCrop, RegionProposer, WholeImageProposer, MIN_REGION_SIDE,
};
pub use train::{
    head_metrics, mean_auroc, predict_image, predict_logits, region_items, train_multihead, HeadMetrics, HeadStatus,
    MultiheadConfig, MultiheadEpoch, MultiheadFold, MultiheadMeta, MultiheadModel, MultiheadResult, RegionItem,
};
