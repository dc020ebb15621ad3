use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BoxXywh, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::synthgen::LOCATION_CLASSES;

/// A proposed anatomical region in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
    /// Index into the 29 anatomical classes when the proposer knows it.
    #[serde(default)]
    pub location_class: Option<usize>,
    pub confidence: f64,
}

impl RegionBox {
    pub fn whole(image: &Image) -> Self {
        Self {
            bbox: BoxXywh::new(0.0, 0.0, image.width() as f64, image.height() as f64),
            location_class: None,
            confidence: 1.0,
        }
    }
}

/// Source of region proposals for one image.
pub trait RegionProposer: Send + Sync {
    fn name(&self) -> &str;
    /// `id` is the manifest id when the image comes from a dataset.
    fn propose(&self, id: Option<&str>, image: &Image) -> Result<Vec<RegionBox>>;
}

/// Proposes the whole image.
pub struct WholeImageProposer;

impl RegionProposer for WholeImageProposer {
    fn name(&self) -> &str {
        "whole-image"
    }

    fn propose(&self, _id: Option<&str>, image: &Image) -> Result<Vec<RegionBox>> {
        Ok(vec![RegionBox::whole(image)])
    }
}

/// Passes through the annotated regions stored in a manifest.
pub struct GroundTruthProposer {
    regions: HashMap<String, Vec<RegionBox>>,
}

impl GroundTruthProposer {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let regions = manifest
            .entries
            .iter()
            .map(|e| {
                let boxes = e
                    .regions
                    .iter()
                    .map(|r| RegionBox {
                        bbox: r.bbox,
                        location_class: Some(r.location_class),
                        confidence: 1.0,
                    })
                    .collect();
                (e.id.clone(), boxes)
            })
            .collect();
        Self { regions }
    }
}

impl RegionProposer for GroundTruthProposer {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn propose(&self, id: Option<&str>, _image: &Image) -> Result<Vec<RegionBox>> {
        let id = id.ok_or_else(|| Error::Config("ground-truth regions need a manifest id".into()))?;
        self.regions
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no annotated regions for {id}")))
    }
}

/// Detector class given either as an index or as a region name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectionClass {
    Index(usize),
    Name(String),
}

/// One detector output: `{"class": 3 | "Distal Femur", "box": [x, y, w, h], "score": 0.9}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: DetectionClass,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn to_region(&self) -> Result<RegionBox> {
        let location_class = match &self.class {
            DetectionClass::Index(i) if *i < LOCATION_CLASSES.len() => *i,
            DetectionClass::Index(i) => return Err(Error::Config(format!("detection class {i} outside 0..29"))),
            DetectionClass::Name(n) => LOCATION_CLASSES
                .iter()
                .position(|c| c.eq_ignore_ascii_case(n))
                .ok_or_else(|| Error::Config(format!("unknown detection class {n:?}")))?,
        };
        if !self.bbox.iter().all(|v| v.is_finite()) || !self.score.is_finite() {
            return Err(Error::Config("detection has non-finite values".into()));
        }
        let [x, y, w, h] = self.bbox;
        Ok(RegionBox {
            bbox: BoxXywh::new(x, y, w, h),
            location_class: Some(location_class),
            confidence: self.score.clamp(0.0, 1.0),
        })
    }
}

/// Adapter for any external detector: a JSON object mapping image id to a
/// list of [`Detection`]s. Detections below `min_score` are dropped.
pub struct DetectionProposer {
    detections: HashMap<String, Vec<Detection>>,
    pub min_score: f64,
}

impl DetectionProposer {
    pub fn from_json(text: &str, min_score: f64) -> Result<Self> {
        let detections: HashMap<String, Vec<Detection>> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("detection JSON: {e}")))?;
        Ok(Self { detections, min_score })
    }

    pub fn new(detections: HashMap<String, Vec<Detection>>, min_score: f64) -> Self {
        Self { detections, min_score }
    }
}

impl RegionProposer for DetectionProposer {
    fn name(&self) -> &str {
        "detector"
    }

    fn propose(&self, id: Option<&str>, _image: &Image) -> Result<Vec<RegionBox>> {
        let Some(list) = id.and_then(|id| self.detections.get(id)) else {
            return Ok(Vec::new());
        };
        list.iter()
            .filter(|d| d.score >= self.min_score)
            .map(Detection::to_region)
            .collect()
    }
}

pub const MIN_REGION_SIDE: f64 = 4.0;

/// Runs `proposer`, clips boxes to the image and drops boxes that become
/// degenerate. Falls back to the whole image, with a warning, when the
/// proposer fails or returns nothing usable.
pub fn propose_regions(image: &Image, id: Option<&str>, proposer: &dyn RegionProposer) -> (Vec<RegionBox>, Vec<String>) {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut warnings = Vec::new();
    let raw = match proposer.propose(id, image) {
        Ok(r) => r,
        Err(e) => {
            warnings.push(format!("{} proposer failed ({e}); using the whole image", proposer.name()));
            Vec::new()
        }
    };
    let mut boxes = Vec::with_capacity(raw.len());
    for r in raw {
        let clipped = r.bbox.clip(w, h);
        if clipped != r.bbox {
            warnings.push(format!("region {:?} clipped to the image bounds", r.bbox));
        }
        if clipped.w < MIN_REGION_SIDE || clipped.h < MIN_REGION_SIDE {
            warnings.push(format!("region {:?} dropped: smaller than 4x4 after clipping", r.bbox));
            continue;
        }
        boxes.push(RegionBox { bbox: clipped, ..r });
    }
    if boxes.is_empty() {
        if warnings.is_empty() {
            warnings.push("no regions proposed; using the whole image".into());
        }
        boxes.push(RegionBox::whole(image));
    }
    (boxes, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Side of the square output crop.
    pub out_size: usize,
    /// Minimum fraction of the region that an augmented window must cover.
    pub ior_floor: f64,
    pub max_rotation_deg: f64,
    /// Brightness and contrast factors are drawn from `1 ± jitter`.
    pub jitter: f64,
    /// Window side relative to the region side.
    pub scale_range: [f64; 2],
    /// Window centre shift as a fraction of the region side.
    pub max_shift: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            out_size: 224,
            ior_floor: 0.7,
            max_rotation_deg: 10.0,
            jitter: 0.1,
            scale_range: [0.8, 1.25],
            max_shift: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub image: Image,
    /// Sampled window before rotation.
    pub window: BoxXywh,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

/// Intersection over region: the fraction of `region` covered by `window`.
pub fn ior(window: &BoxXywh, region: &BoxXywh) -> f64 {
    let a = region.area();
    if a <= 0.0 {
        0.0
    } else {
        window.intersection(region) / a
    }
}

fn sample_window(region: &BoxXywh, cfg: &CropConfig, rng: &mut ChaCha8Rng) -> BoxXywh {
    let [lo, hi] = cfg.scale_range;
    for _ in 0..100 {
        let w = region.w * rng.gen_range(lo..=hi);
        let h = region.h * rng.gen_range(lo..=hi);
        let cx = region.x + region.w / 2.0 + region.w * rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let cy = region.y + region.h / 2.0 + region.h * rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let window = BoxXywh::new(cx - w / 2.0, cy - h / 2.0, w, h);
        if ior(&window, region) >= cfg.ior_floor {
            return window;
        }
    }
    *region
}

/// Crops `bbox` from `image` to `out_size²`. Without augmentation this is a
/// tight crop; with it the window is jittered in scale and position subject
/// to the IoR floor, rotated about its centre and brightness/contrast
/// jittered.
pub fn crop_region(image: &Image, bbox: &BoxXywh, augment: bool, seed: u64, cfg: &CropConfig) -> Result<RegionCrop> {
    if !(bbox.w >= MIN_REGION_SIDE && bbox.h >= MIN_REGION_SIDE) {
        return Err(Error::Shape(format!(
            "region {}x{} is smaller than 4x4 pixels",
            bbox.w, bbox.h
        )));
    }
    if cfg.out_size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let n = cfg.out_size;
    if !augment {
        let image = image.crop_resize(bbox.y, bbox.x, bbox.h, bbox.w, n, n);
        return Ok(RegionCrop {
            image,
            window: *bbox,
            rotation_deg: 0.0,
            brightness: 1.0,
            contrast: 1.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = sample_window(bbox, cfg, &mut rng);
    let deg = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
    let brightness = rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let contrast = rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
    let (cy, cx) = (window.y + window.h / 2.0, window.x + window.w / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let mut out = image.sample_affine(n, n, |i, j| {
        let v = (i + 0.5) * window.h / n as f64 - window.h / 2.0;
        let u = (j + 0.5) * window.w / n as f64 - window.w / 2.0;
        (cy + u * s + v * c - 0.5, cx + u * c - v * s - 0.5)
    });
    let mean = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.data().len() as f64;
    for v in out.data_mut() {
        let x = ((f64::from(*v) - mean) * contrast + mean) * brightness;
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Ok(RegionCrop {
        image: out,
        window,
        rotation_deg: deg,
        brightness,
        contrast,
    })
}
