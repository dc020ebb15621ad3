//! Samples, manifests, labels and split plans shared by every workflow.

mod image;
mod ingest;
mod manifest;
mod source;
mod split;

pub use self::image::Image;
pub use ingest::{decode_bytes, encode_png_gray, from_dynamic, image_dimensions, ingest_bytes, ingest_image, save_png_gray};
pub use manifest::{
    load_manifest, BoxXywh, DatasetManifest, ImageSample, LabeledTarget, ManifestEntry,
    RegionAnnotation, TaskDecl, TaskKind,
};
pub use source::{DiskSource, ImageSource, MemorySource, TrackingSource};
pub use split::{
    make_splits, stratified_quotas, subsample_size, subsample_training, Fold, SplitParams,
    SplitPlan,
};
