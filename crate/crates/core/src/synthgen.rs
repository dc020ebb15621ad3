//! Procedural radiograph-like corpus: smooth cortical "shafts" on a dark
//! background, with injectable tumors, fractures and implants.
//!
//! Every anomaly kind maps onto one head of the region classifier so the
//! whole pipeline can be exercised without clinical data.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_png_gray, BoxXywh, DatasetManifest, Image, ImageSample, LabeledTarget,
    ManifestEntry, MemorySource, RegionAnnotation, TaskDecl, TaskKind,
};
use crate::error::{Error, Result};

pub const TASK_ABNORMALITY: &str = "abnormality";
pub const TASK_TUMOR_SUBTYPE: &str = "tumor_subtype";
pub const TASK_LOCATION: &str = "location";
pub const TASK_FRACTURE_TYPE: &str = "fracture_type";
pub const TASK_IMPLANT: &str = "implant";
pub const TASK_TUMOR_PRESENCE: &str = "tumor-presence";
pub const TASK_TUMOR_MALIGNANCY: &str = "tumor-malignancy";
pub const TASK_FRACTURE: &str = "fracture";

pub const TUMOR_CLASSES: [&str; 4] = ["malignant", "intermediate", "benign", "normal"];
pub const FRACTURE_CLASSES: [&str; 3] = [
    "neoplastic pathologic fracture",
    "non-neoplastic fracture",
    "normal",
];

/// Anatomical region names used for the 29-way location head.
pub const LOCATION_CLASSES: [&str; 29] = [
    "Distal Femur",
    "Proximal Femur",
    "Proximal Tibia",
    "Proximal Fibula",
    "Patella",
    "Pelvis",
    "Femur Diaphysis",
    "Metacarpal",
    "Metatarsal",
    "Proximal Humerus",
    "Clavicle",
    "Distal Tibia",
    "Finger Phalanges",
    "Hindfoot",
    "Distal Fibula",
    "Proximal Radius",
    "Distal Humerus",
    "Scapula",
    "Tibia Diaphysis",
    "Proximal Ulna",
    "Fibula Diaphysis",
    "Humerus Diaphysis",
    "Toe Phalanges",
    "Distal Radius",
    "Midfoot",
    "Carpal Bones",
    "Distal Ulna",
    "Radius Diaphysis",
    "Ulna Diaphysis",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    TumorBlob,
    FractureGap,
    ImplantBar,
}

impl AnomalyKind {
    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::TumorBlob => "tumor_blob",
            AnomalyKind::FractureGap => "fracture_gap",
            AnomalyKind::ImplantBar => "implant_bar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorSubtype {
    Malignant,
    Intermediate,
    Benign,
}

impl TumorSubtype {
    pub fn class_index(&self) -> usize {
        match self {
            TumorSubtype::Malignant => 0,
            TumorSubtype::Intermediate => 1,
            TumorSubtype::Benign => 2,
        }
    }
}

/// One injected abnormality.
///
/// `intensity_delta` is a non-negative strength: it brightens benign blobs,
/// darkens lytic (malignant) blobs and fracture gaps, and pulls implant pixels
/// towards full intensity. Zero leaves the image untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    pub scale: f64,
    pub intensity_delta: f64,
    /// Orientation in radians; gaps run across it, bars along it.
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub subtype: Option<TumorSubtype>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// `(H, W)`.
    pub size: (usize, usize),
    pub seed: u64,
    pub mix: BTreeMap<AnomalyKind, f64>,
}

impl CorpusSpec {
    pub fn new(n_normal: usize, n_abnormal: usize, size: usize, seed: u64) -> Self {
        let mix = [
            (AnomalyKind::TumorBlob, 0.5),
            (AnomalyKind::FractureGap, 0.3),
            (AnomalyKind::ImplantBar, 0.2),
        ]
        .into_iter()
        .collect();
        Self {
            n_normal,
            n_abnormal,
            size: (size, size),
            seed,
            mix,
        }
    }

    pub fn with_mix(mut self, mix: &[(AnomalyKind, f64)]) -> Self {
        self.mix = mix.iter().copied().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.0 < 32 || self.size.1 < 32 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32x32, got {:?}",
                self.size
            )));
        }
        if self.n_abnormal > 0 {
            let total: f64 = self.mix.values().sum();
            if (total - 1.0).abs() > 1e-9 || self.mix.values().any(|&p| p < 0.0) {
                return Err(Error::Config(format!(
                    "anomaly proportions must be non-negative and sum to 1, got {total}"
                )));
            }
        }
        Ok(())
    }
}

/// 64-bit FNV-1a folded through splitmix64; stable across platforms.
pub fn derive_seed(corpus_seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ corpus_seed;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shaft {
    cy: f64,
    cx: f64,
    angle: f64,
    half_len: f64,
    half_width: f64,
    knob_start: bool,
    knob_end: bool,
}

impl Shaft {
    fn axis(&self) -> (f64, f64) {
        (self.angle.sin(), self.angle.cos())
    }

    /// Coordinates along (u) and across (v) the shaft axis.
    fn local(&self, i: f64, j: f64) -> (f64, f64) {
        let (dy, dx) = (i - self.cy, j - self.cx);
        let (sy, sx) = self.axis();
        (dy * sy + dx * sx, -dy * sx + dx * sy)
    }

    fn point(&self, u: f64) -> (f64, f64) {
        let (sy, sx) = self.axis();
        (self.cy + u * sy, self.cx + u * sx)
    }

    fn knob_radius(&self) -> f64 {
        self.half_width * 1.55
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.knob_radius().max(self.half_width);
        let (a, b) = (self.point(-self.half_len), self.point(self.half_len));
        (
            a.0.min(b.0) - r,
            a.1.min(b.1) - r,
            a.0.max(b.0) + r,
            a.1.max(b.1) + r,
        )
    }
}

/// Scene description of one normal synthetic radiograph.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub size: (usize, usize),
    pub location: usize,
    shafts: Vec<Shaft>,
    gain: f64,
    noise_sigma: f64,
}

/// Decomposes a location class into (orientation bin, shaft count, end style).
pub fn location_features(location: usize) -> (usize, usize, usize) {
    (location / 8, 1 + (location % 8) / 4, location % 4)
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bone intensity at distance `d` from an axis (or centre) for a structure of
/// half-width `hw`: bright cortex, dimmer medulla, soft edge.
fn bone_profile(d: f64, hw: f64) -> f64 {
    let cortex = (hw * 0.35).max(1.0);
    let inside = 1.0 - smoothstep(hw - 0.6, hw + 0.6, d);
    let medulla = 1.0 - smoothstep(hw - cortex - 0.6, hw - cortex + 0.6, d);
    inside * (0.82 - 0.26 * medulla)
}

impl Phantom {
    pub fn random(seed: u64, size: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let location = rng.gen_range(0..LOCATION_CLASSES.len());
        Self::with_location(&mut rng, size, location)
    }

    pub fn at_location(seed: u64, size: (usize, usize), location: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_location(&mut rng, size, location % LOCATION_CLASSES.len())
    }

    fn with_location(rng: &mut ChaCha8Rng, size: (usize, usize), location: usize) -> Self {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let s = h.min(w);
        let (orient, count, ends) = location_features(location);
        let angle = orient as f64 * PI / 4.0 + rng.gen_range(-4.0..4.0f64).to_radians();
        let half_len = s * rng.gen_range(0.28..0.33);
        let half_width = s * rng.gen_range(0.058..0.072);
        let cy = h / 2.0 + rng.gen_range(-0.04..0.04) * h;
        let cx = w / 2.0 + rng.gen_range(-0.04..0.04) * w;
        let spacing = half_width * 3.3;
        let offsets: Vec<f64> = if count == 1 {
            vec![0.0]
        } else {
            vec![-spacing / 2.0, spacing / 2.0]
        };
        let (sy, sx) = (angle.sin(), angle.cos());
        let shafts = offsets
            .iter()
            .map(|&o| Shaft {
                // perpendicular offset
                cy: cy + o * sx,
                cx: cx - o * sy,
                angle,
                half_len,
                half_width,
                knob_start: ends & 1 == 1,
                knob_end: ends & 2 == 2,
            })
            .collect();
        Self {
            size,
            location,
            shafts,
            gain: rng.gen_range(0.92..1.08),
            noise_sigma: 0.01,
        }
    }

    /// Noise-free bone/soft-tissue intensity at a pixel centre.
    fn intensity(&self, i: f64, j: f64) -> f64 {
        let mut bone: f64 = 0.0;
        let mut soft: f64 = 0.0;
        for s in &self.shafts {
            let (u, v) = s.local(i, j);
            let along = 1.0 - smoothstep(s.half_len - 0.6, s.half_len + 0.6, u.abs());
            bone = bone.max(bone_profile(v.abs(), s.half_width) * along);
            let knobs = [(s.knob_start, -s.half_len), (s.knob_end, s.half_len)];
            for (on, at) in knobs {
                if on {
                    let (ky, kx) = s.point(at);
                    let d = ((i - ky).powi(2) + (j - kx).powi(2)).sqrt();
                    bone = bone.max(bone_profile(d, s.knob_radius()) * 0.95);
                }
            }
            let tissue_w = s.half_width * 2.6;
            let tissue = (1.0 - smoothstep(tissue_w - 2.0, tissue_w + 2.0, v.abs()))
                * (1.0 - smoothstep(s.half_len + 2.0, s.half_len + 6.0, u.abs()));
            soft = soft.max(0.1 * tissue);
        }
        0.02 + soft.max(bone * self.gain)
    }

    pub fn render(&self, seed: u64) -> Image {
        let (h, w) = self.size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let v = self.intensity(i as f64, j as f64) + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Image::new(h, w, 1, data).expect("consistent buffer")
    }

    /// Square box around all shafts with a small margin, clipped to the image.
    pub fn region_box(&self) -> BoxXywh {
        let (mut y0, mut x0, mut y1, mut x1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for s in &self.shafts {
            let b = s.bounds();
            y0 = y0.min(b.0);
            x0 = x0.min(b.1);
            y1 = y1.max(b.2);
            x1 = x1.max(b.3);
        }
        let margin = 3.0;
        let side = (y1 - y0).max(x1 - x0) + 2.0 * margin;
        let (cy, cx) = ((y0 + y1) / 2.0, (x0 + x1) / 2.0);
        BoxXywh::new(cx - side / 2.0, cy - side / 2.0, side, side)
            .clip(self.size.1 as f64, self.size.0 as f64)
    }

    /// A point on a shaft axis, at fraction `t ∈ [-1, 1]` of its half-length.
    pub fn shaft_point(&self, shaft: usize, t: f64) -> (f64, f64) {
        let s = &self.shafts[shaft % self.shafts.len()];
        s.point(t * s.half_len)
    }

    pub fn shaft_count(&self) -> usize {
        self.shafts.len()
    }

    pub fn shaft_angle(&self) -> f64 {
        self.shafts[0].angle
    }

    pub fn shaft_half_width(&self) -> f64 {
        self.shafts[0].half_width
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;

/// Deterministic normal synthetic radiograph (single channel).
pub fn generate_normal(seed: u64, size: (usize, usize)) -> Result<ImageSample> {
    if size.0 < 32 || size.1 < 32 {
        return Err(Error::Config(format!(
            "synthetic images must be at least 32x32, got {size:?}"
        )));
    }
    let phantom = Phantom::random(seed, size);
    Ok(sample_from(&phantom, seed, format!("normal-{seed}")))
}

fn sample_from(phantom: &Phantom, seed: u64, id: String) -> ImageSample {
    let mut sample = ImageSample::new(id, phantom.render(seed));
    sample.labels = normal_labels(phantom.location);
    sample
}

fn normal_labels(location: usize) -> BTreeMap<String, LabeledTarget> {
    [
        (TASK_ABNORMALITY, LabeledTarget::class(0)),
        (TASK_TUMOR_SUBTYPE, LabeledTarget::class(3)),
        (TASK_LOCATION, LabeledTarget::class(location)),
        (TASK_FRACTURE_TYPE, LabeledTarget::class(2)),
        (TASK_IMPLANT, LabeledTarget::class(0)),
        (TASK_TUMOR_PRESENCE, LabeledTarget::class(0)),
        (TASK_TUMOR_MALIGNANCY, LabeledTarget::masked()),
        (TASK_FRACTURE, LabeledTarget::class(0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Task declarations for every label the corpus emits.
pub fn corpus_tasks() -> Vec<TaskDecl> {
    let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        TaskDecl {
            id: TASK_ABNORMALITY.into(),
            kind: TaskKind::Binary,
            classes: names(&["normal", "abnormal"]),
        },
        TaskDecl {
            id: TASK_TUMOR_SUBTYPE.into(),
            kind: TaskKind::Multiclass { k: 4 },
            classes: names(&TUMOR_CLASSES),
        },
        TaskDecl {
            id: TASK_LOCATION.into(),
            kind: TaskKind::Multiclass { k: 29 },
            classes: names(&LOCATION_CLASSES),
        },
        TaskDecl {
            id: TASK_FRACTURE_TYPE.into(),
            kind: TaskKind::Multiclass { k: 3 },
            classes: names(&FRACTURE_CLASSES),
        },
        TaskDecl {
            id: TASK_IMPLANT.into(),
            kind: TaskKind::Binary,
            classes: names(&["absent", "present"]),
        },
        TaskDecl {
            id: TASK_TUMOR_PRESENCE.into(),
            kind: TaskKind::Binary,
            classes: names(&["absent", "present"]),
        },
        TaskDecl {
            id: TASK_TUMOR_MALIGNANCY.into(),
            kind: TaskKind::Binary,
            classes: names(&["benign", "malignant"]),
        },
        TaskDecl {
            id: TASK_FRACTURE.into(),
            kind: TaskKind::Binary,
            classes: names(&["absent", "present"]),
        },
    ]
}

/// Per-pixel footprint weight in `[0, 1]` (0 outside) and the way the pixel
/// changes, for one anomaly.
fn footprint(spec: &AnomalySpec, i: f64, j: f64, ragged_phase: f64) -> f64 {
    let (dy, dx) = (i - spec.center.0, j - spec.center.1);
    match spec.kind {
        AnomalyKind::TumorBlob => {
            let r = (dy * dy + dx * dx).sqrt();
            let radius = match spec.subtype {
                Some(TumorSubtype::Malignant) => {
                    let theta = dy.atan2(dx);
                    spec.scale * (0.85 + 0.15 * (5.0 * theta + ragged_phase).sin())
                }
                _ => spec.scale,
            };
            if r <= radius {
                (1.0 - (r / radius).powi(2)).max(1e-3)
            } else {
                0.0
            }
        }
        AnomalyKind::FractureGap => {
            let (sy, sx) = (spec.angle.sin(), spec.angle.cos());
            // gap runs perpendicular to `angle`
            let along = dy * sy + dx * sx;
            let across = -dy * sx + dx * sy;
            let half_len = spec.scale * 4.0;
            if along.abs() <= spec.scale.max(0.5) && across.abs() <= half_len {
                1.0
            } else {
                0.0
            }
        }
        AnomalyKind::ImplantBar => {
            let (sy, sx) = (spec.angle.sin(), spec.angle.cos());
            let along = dy * sy + dx * sx;
            let across = -dy * sx + dx * sy;
            let half_w = (spec.scale * 0.25).max(1.2);
            if along.abs() <= spec.scale && across.abs() <= half_w {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn modify(spec: &AnomalySpec, v: f64, weight: f64, r_frac: f64) -> f64 {
    let d = spec.intensity_delta;
    match spec.kind {
        AnomalyKind::TumorBlob => match spec.subtype.unwrap_or(TumorSubtype::Benign) {
            TumorSubtype::Benign => v + d * weight.sqrt(),
            TumorSubtype::Malignant => v * (1.0 - d * weight.sqrt()),
            TumorSubtype::Intermediate => {
                if r_frac >= 0.6 {
                    v + d * 0.8
                } else {
                    v * (1.0 - d)
                }
            }
        },
        AnomalyKind::FractureGap => v * (1.0 - d),
        AnomalyKind::ImplantBar => v + d * (1.0 - v),
    }
}

/// Injects one anomaly; returns the modified sample and its footprint mask
/// (`H×W`, 1 inside). Pixels outside the mask are left bit-identical.
pub fn inject_anomaly(
    sample: &ImageSample,
    spec: &AnomalySpec,
    seed: u64,
) -> Result<(ImageSample, Vec<u8>)> {
    let img = &sample.pixels;
    let (h, w) = (img.height(), img.width());
    let (ci, cj) = spec.center;
    if !(ci >= 0.0 && cj >= 0.0 && ci < h as f64 && cj < w as f64) {
        return Err(Error::AnomalyOffBone(format!(
            "center {:?} outside {h}x{w}",
            spec.center
        )));
    }
    // bone test on the centre neighbourhood
    let (ci_u, cj_u) = (ci.round() as usize, cj.round() as usize);
    let mut peak: f64 = 0.0;
    for i in ci_u.saturating_sub(1)..=(ci_u + 1).min(h - 1) {
        for j in cj_u.saturating_sub(1)..=(cj_u + 1).min(w - 1) {
            peak = peak.max(luminance_at(img, i, j));
        }
    }
    if peak < 0.3 {
        return Err(Error::AnomalyOffBone(format!(
            "center {:?} has peak intensity {peak:.3}",
            spec.center
        )));
    }
    apply_anomaly(sample, spec, seed)
}

/// Injection without the bone test, for anomalies whose site was validated
/// before another anomaly altered it.
fn apply_anomaly(
    sample: &ImageSample,
    spec: &AnomalySpec,
    seed: u64,
) -> Result<(ImageSample, Vec<u8>)> {
    let img = &sample.pixels;
    let (h, w) = (img.height(), img.width());
    let (ci, cj) = spec.center;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut mask = vec![0u8; h * w];
    let mut out = img.clone();
    for i in 0..h {
        for j in 0..w {
            let weight = footprint(spec, i as f64, j as f64, phase);
            if weight <= 0.0 {
                continue;
            }
            if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                return Err(Error::Shape(format!(
                    "anomaly footprint touches the image border at ({i}, {j})"
                )));
            }
            mask[i * w + j] = 1;
            let r_frac = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt()
                / spec.scale.max(1e-9);
            for c in 0..img.channels() {
                let v = f64::from(img.get(i, j, c));
                let nv = modify(spec, v, weight, r_frac).clamp(0.0, 1.0);
                out.set(i, j, c, nv as f32);
            }
        }
    }
    let mut result = sample.clone();
    result.pixels = out;
    apply_labels(&mut result.labels, spec);
    Ok((result, mask))
}

fn set(labels: &mut BTreeMap<String, LabeledTarget>, task: &str, t: LabeledTarget) {
    labels.insert(task.to_string(), t);
}

fn apply_labels(labels: &mut BTreeMap<String, LabeledTarget>, spec: &AnomalySpec) {
    set(labels, TASK_ABNORMALITY, LabeledTarget::class(1));
    match spec.kind {
        AnomalyKind::TumorBlob => {
            let subtype = spec.subtype.unwrap_or(TumorSubtype::Benign);
            set(labels, TASK_TUMOR_SUBTYPE, LabeledTarget::class(subtype.class_index()));
            set(labels, TASK_TUMOR_PRESENCE, LabeledTarget::class(1));
            let malignancy = match subtype {
                TumorSubtype::Malignant => LabeledTarget::class(1),
                TumorSubtype::Benign => LabeledTarget::class(0),
                TumorSubtype::Intermediate => LabeledTarget::masked(),
            };
            set(labels, TASK_TUMOR_MALIGNANCY, malignancy);
            // tumor sources carry no fracture annotation unless a gap is added
            let fracture_known = labels
                .get(TASK_FRACTURE)
                .is_some_and(|t| !t.m && t.y == 1.0);
            if !fracture_known {
                set(labels, TASK_FRACTURE_TYPE, LabeledTarget::masked());
                set(labels, TASK_FRACTURE, LabeledTarget::masked());
            }
        }
        AnomalyKind::FractureGap => {
            let tumor = labels
                .get(TASK_TUMOR_PRESENCE)
                .is_some_and(|t| !t.m && t.y == 1.0);
            let class = if tumor { 0 } else { 1 };
            set(labels, TASK_FRACTURE_TYPE, LabeledTarget::class(class));
            set(labels, TASK_FRACTURE, LabeledTarget::class(1));
        }
        AnomalyKind::ImplantBar => {
            set(labels, TASK_IMPLANT, LabeledTarget::class(1));
        }
    }
}

fn luminance_at(img: &Image, i: usize, j: usize) -> f64 {
    (0..img.channels())
        .map(|c| f64::from(img.get(i, j, c)))
        .sum::<f64>()
        / img.channels() as f64
}

/// One generated corpus item held in memory.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub image: Image,
    pub anomaly_mask: Option<Vec<u8>>,
}

fn choose_subtype(rng: &mut ChaCha8Rng, index_in_kind: usize, n_kind: usize) -> TumorSubtype {
    // a fixed 10% of tumor cases are intermediate
    let n_inter = ((n_kind as f64) * 0.1).round() as usize;
    if index_in_kind < n_inter {
        TumorSubtype::Intermediate
    } else if rng.gen_bool(0.4) {
        TumorSubtype::Malignant
    } else {
        TumorSubtype::Benign
    }
}

/// Anomaly placed on a random shaft of `phantom`, with kind-specific defaults.
pub fn default_anomaly(
    phantom: &Phantom,
    kind: AnomalyKind,
    subtype: Option<TumorSubtype>,
    rng: &mut ChaCha8Rng,
) -> AnomalySpec {
    let shaft = rng.gen_range(0..phantom.shaft_count());
    let t = rng.gen_range(-0.45..0.45);
    let center = phantom.shaft_point(shaft, t);
    let hw = phantom.shaft_half_width();
    let angle = phantom.shaft_angle();
    match kind {
        AnomalyKind::TumorBlob => {
            let subtype = subtype.unwrap_or(TumorSubtype::Benign);
            let delta = match subtype {
                TumorSubtype::Benign => 0.4,
                TumorSubtype::Malignant => 0.75,
                TumorSubtype::Intermediate => 0.45,
            };
            AnomalySpec {
                kind,
                center,
                scale: hw * rng.gen_range(1.7..2.2),
                intensity_delta: delta,
                angle,
                subtype: Some(subtype),
            }
        }
        AnomalyKind::FractureGap => AnomalySpec {
            kind,
            center,
            scale: 1.8,
            intensity_delta: 0.85,
            angle: angle + rng.gen_range(-0.25..0.25),
            subtype: None,
        },
        AnomalyKind::ImplantBar => AnomalySpec {
            kind,
            center: phantom.shaft_point(shaft, rng.gen_range(-0.2..0.2)),
            scale: phantom.shafts[0].half_len * 0.6,
            intensity_delta: 0.9,
            angle,
            subtype: None,
        },
    }
}

fn apportion(n: usize, mix: &BTreeMap<AnomalyKind, f64>) -> Vec<(AnomalyKind, usize)> {
    let kinds: Vec<AnomalyKind> = mix.keys().copied().collect();
    let weights: Vec<f64> = kinds.iter().map(|k| mix[k]).collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..kinds.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rest = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    kinds.into_iter().zip(counts).collect()
}

/// Generates the whole corpus in memory. Ids are `syn{index:05}`; each
/// synthetic patient owns 1–4 consecutive images.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let mut plan: Vec<Option<AnomalyKind>> = vec![None; spec.n_normal];
    if spec.n_abnormal > 0 {
        for (kind, count) in apportion(spec.n_abnormal, &spec.mix) {
            plan.extend(std::iter::repeat(Some(kind)).take(count));
        }
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rand::seq::SliceRandom::shuffle(plan.as_mut_slice(), &mut order_rng);

    let n_tumor = plan
        .iter()
        .filter(|k| **k == Some(AnomalyKind::TumorBlob))
        .count();
    let mut tumor_seen = 0usize;
    let mut patient = 0usize;
    let mut left_for_patient = 0usize;
    let mut items = Vec::with_capacity(plan.len());
    for (index, kind) in plan.into_iter().enumerate() {
        if left_for_patient == 0 {
            patient += 1;
            left_for_patient = order_rng.gen_range(1..=4);
        }
        left_for_patient -= 1;
        let id = format!("syn{index:05}");
        let seed = derive_seed(spec.seed, &id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phantom = Phantom::random(rng.gen(), spec.size);
        let mut sample = sample_from(&phantom, seed, id.clone());
        let mut mask = None;
        if let Some(kind) = kind {
            let subtype = if kind == AnomalyKind::TumorBlob {
                tumor_seen += 1;
                Some(choose_subtype(&mut rng, tumor_seen - 1, n_tumor))
            } else {
                None
            };
            let anomaly = default_anomaly(&phantom, kind, subtype, &mut rng);
            let (mut injected, mut m) = inject_anomaly(&sample, &anomaly, rng.gen())?;
            // a quarter of fractures run through a tumor (pathologic fracture)
            if kind == AnomalyKind::FractureGap && rng.gen_bool(0.25) {
                let sub = if rng.gen_bool(0.5) {
                    TumorSubtype::Malignant
                } else {
                    TumorSubtype::Benign
                };
                let mut blob = default_anomaly(&phantom, AnomalyKind::TumorBlob, Some(sub), &mut rng);
                blob.center = anomaly.center;
                let (with_blob, blob_mask) = inject_anomaly(&sample, &blob, rng.gen())?;
                let (both, gap_mask) = apply_anomaly(&with_blob, &anomaly, rng.gen())?;
                injected = both;
                m = blob_mask
                    .iter()
                    .zip(&gap_mask)
                    .map(|(a, b)| a | b)
                    .collect();
            }
            sample = injected;
            mask = Some(m);
        }
        let mut meta = BTreeMap::new();
        meta.insert(
            "anomaly".to_string(),
            kind.map_or("none", |k| k.name()).to_string(),
        );
        let entry = ManifestEntry {
            path: PathBuf::from(format!("images/{id}.png")),
            id: id.clone(),
            patient_id: Some(format!("pat{patient:04}")),
            body_part: Some(LOCATION_CLASSES[phantom.location].to_string()),
            labels: sample.labels.clone(),
            regions: vec![RegionAnnotation {
                bbox: phantom.region_box(),
                location_class: phantom.location,
            }],
            anomaly_mask: mask
                .as_ref()
                .map(|_| PathBuf::from(format!("masks/{id}.png"))),
            meta,
        };
        items.push(CorpusItem {
            entry,
            image: sample.pixels,
            anomaly_mask: mask,
        });
    }
    Ok(items)
}

/// Holds a generated corpus in memory behind the [`crate::datamodel::ImageSource`] interface.
pub fn memory_source(items: &[CorpusItem]) -> Result<MemorySource> {
    let manifest = DatasetManifest::new(
        corpus_tasks(),
        items.iter().map(|i| i.entry.clone()).collect(),
        PathBuf::from("."),
    )?;
    let images = items
        .iter()
        .map(|i| (i.entry.id.clone(), i.image.clone()))
        .collect();
    MemorySource::new(manifest, images)
}

/// Writes PNG images, anomaly masks and `manifest.json` under `out_dir`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let items = generate_corpus(spec)?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for item in &items {
        save_png_gray(&item.image, &out_dir.join(&item.entry.path))?;
        if let (Some(mask), Some(rel)) = (&item.anomaly_mask, &item.entry.anomaly_mask) {
            let m = Image::new(
                item.image.height(),
                item.image.width(),
                1,
                mask.iter().map(|&v| f32::from(v)).collect(),
            )?;
            save_png_gray(&m, &out_dir.join(rel))?;
        }
    }
    let manifest = DatasetManifest::new(
        corpus_tasks(),
        items.into_iter().map(|i| i.entry).collect(),
        out_dir.to_path_buf(),
    )?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shaft_center_spec(sample_seed: u64, kind: AnomalyKind) -> (ImageSample, AnomalySpec) {
        let phantom = Phantom::random(sample_seed, (64, 64));
        let sample = sample_from(&phantom, sample_seed, "x".into());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = default_anomaly(&phantom, kind, None, &mut rng);
        spec.center = phantom.shaft_point(0, 0.0);
        (sample, spec)
    }

    #[test]
    fn normal_generation_is_deterministic_and_seed_sensitive() {
        let a = generate_normal(0, (64, 64)).unwrap();
        let b = generate_normal(0, (64, 64)).unwrap();
        let c = generate_normal(1, (64, 64)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_ne!(a.pixels, c.pixels);
        assert!(generate_normal(0, (16, 64)).is_err());
    }

    #[test]
    fn tumor_blob_is_local() {
        let (sample, mut spec) = shaft_center_spec(3, AnomalyKind::TumorBlob);
        spec.scale = 6.0;
        let (out, mask) = inject_anomaly(&sample, &spec, 0).unwrap();
        let mut changed = 0;
        for (k, (a, b)) in sample.pixels.data().iter().zip(out.pixels.data()).enumerate() {
            if a != b {
                assert_eq!(mask[k], 1, "pixel {k} changed outside the mask");
                changed += 1;
            }
        }
        assert!(changed > 0);
        assert_eq!(out.labels[TASK_TUMOR_PRESENCE], LabeledTarget::class(1));
        assert!(out.labels[TASK_FRACTURE_TYPE].is_masked());
    }

    #[test]
    fn zero_delta_leaves_image_unchanged() {
        for kind in [AnomalyKind::TumorBlob, AnomalyKind::FractureGap, AnomalyKind::ImplantBar] {
            let (sample, mut spec) = shaft_center_spec(5, kind);
            spec.intensity_delta = 0.0;
            let (out, mask) = inject_anomaly(&sample, &spec, 0).unwrap();
            assert_eq!(out.pixels, sample.pixels);
            assert!(mask.iter().any(|&m| m == 1));
        }
    }

    #[test]
    fn fracture_gap_darkens() {
        let (sample, spec) = shaft_center_spec(7, AnomalyKind::FractureGap);
        let (out, mask) = inject_anomaly(&sample, &spec, 0).unwrap();
        let mean = |img: &Image| {
            let vals: Vec<f32> = img
                .data()
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m == 1)
                .map(|(v, _)| *v)
                .collect();
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        assert!(mean(&out.pixels) < mean(&sample.pixels));
        assert_eq!(out.labels[TASK_FRACTURE_TYPE], LabeledTarget::class(1));
    }

    #[test]
    fn implant_sets_implant_head() {
        let (sample, spec) = shaft_center_spec(9, AnomalyKind::ImplantBar);
        let (out, _) = inject_anomaly(&sample, &spec, 0).unwrap();
        assert_eq!(out.labels[TASK_IMPLANT], LabeledTarget::class(1));
        assert_eq!(out.labels[TASK_ABNORMALITY], LabeledTarget::class(1));
    }

    #[test]
    fn off_bone_anomaly_is_rejected() {
        let (sample, mut spec) = shaft_center_spec(11, AnomalyKind::TumorBlob);
        spec.center = (1.0, 1.0);
        let err = inject_anomaly(&sample, &spec, 0).unwrap_err();
        assert!(err.to_string().contains("anomaly off-bone"), "{err}");
    }

    #[test]
    fn corpus_counts_and_masking() {
        let spec = CorpusSpec::new(20, 20, 48, 4).with_mix(&[(AnomalyKind::TumorBlob, 1.0)]);
        let items = generate_corpus(&spec).unwrap();
        assert_eq!(items.len(), 40);
        let abnormal: Vec<_> = items
            .iter()
            .filter(|i| i.entry.labels[TASK_ABNORMALITY].y == 1.0)
            .collect();
        assert_eq!(abnormal.len(), 20);
        for item in abnormal {
            assert_eq!(item.entry.labels[TASK_TUMOR_PRESENCE], LabeledTarget::class(1));
            assert!(item.entry.labels[TASK_FRACTURE_TYPE].is_masked());
        }
        let intermediate = items
            .iter()
            .filter(|i| i.entry.labels[TASK_TUMOR_SUBTYPE] == LabeledTarget::class(1))
            .count();
        assert_eq!(intermediate, 2);
    }

    #[test]
    fn patients_own_one_to_four_images() {
        let items = generate_corpus(&CorpusSpec::new(60, 40, 32, 2)).unwrap();
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        for i in &items {
            *per.entry(i.entry.patient_id.clone().unwrap()).or_default() += 1;
        }
        assert!(per.values().all(|&c| (1..=4).contains(&c)));
    }

    #[test]
    fn mix_must_sum_to_one() {
        let spec = CorpusSpec::new(1, 1, 32, 0).with_mix(&[(AnomalyKind::TumorBlob, 0.5)]);
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn seed_derivation_is_stable() {
        assert_eq!(derive_seed(0, "syn00000"), derive_seed(0, "syn00000"));
        assert_ne!(derive_seed(0, "syn00000"), derive_seed(1, "syn00000"));
        assert_ne!(derive_seed(0, "syn00000"), derive_seed(0, "syn00001"));
    }

    #[test]
    fn location_features_cover_distinct_combinations() {
        let set: std::collections::BTreeSet<_> = (0..29).map(location_features).collect();
        assert_eq!(set.len(), 29);
    }

    #[test]
    fn abnormal_corpora_generate_for_many_seeds() {
        for seed in (0..12).chain([300]) {
            for size in [32, 64] {
                let items = generate_corpus(&CorpusSpec::new(0, 100, size, seed)).unwrap();
                assert_eq!(items.len(), 100);
            }
        }
    }
}
