use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layout::{HeadLayout, HEAD_ABNORMALITY, HEAD_FRACTURE, HEAD_IMPLANT, HEAD_TUMOR_SUBTYPE, SUBTYPE_MALIGNANT, SUBTYPE_NORMAL};
use super::region::RegionBox;
use crate::error::{Error, Result};

/// Index of the normal class within the fracture group.
pub const FRACTURE_NORMAL: usize = 2;

/// Per-head probabilities for one region, keyed by head name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPrediction {
    pub region: RegionBox,
    pub probabilities: BTreeMap<String, Vec<f64>>,
}

impl RegionPrediction {
    pub fn from_logits(region: RegionBox, logits: &[f64], layout: &HeadLayout) -> Result<Self> {
        let probs = layout.probabilities(logits)?;
        let probabilities = layout.groups.iter().map(|g| g.name.clone()).zip(probs).collect();
        Ok(Self { region, probabilities })
    }

    pub fn head(&self, name: &str) -> Result<&[f64]> {
        self.probabilities
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Shape(format!("region prediction lacks head {name}")))
    }

    pub fn p_malignant(&self) -> Result<f64> {
        Ok(self.head(HEAD_TUMOR_SUBTYPE)?[SUBTYPE_MALIGNANT])
    }
}

/// When a region counts as "classified as bone tumor".
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trigger {
    /// Tumor-subtype argmax is anything but normal.
    #[default]
    SubtypeArgmax,
    /// Abnormality probability strictly above `threshold`.
    Abnormality { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Malignant iff the largest regional P(malignant) exceeds this.
    pub malignant: f64,
    pub implant: f64,
    pub trigger: Trigger,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            malignant: 0.5,
            implant: 0.5,
            trigger: Trigger::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Malignancy {
    Malignant,
    Benign,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub tumor_positive: bool,
    pub malignancy: Malignancy,
    /// Any region whose fracture argmax is not normal.
    pub fracture: bool,
    pub implant: bool,
    pub regions: Vec<RegionPrediction>,
    pub thresholds: Thresholds,
}

fn argmax(p: &[f64]) -> usize {
    // first maximum wins, matching the evaluation argmax
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn region_is_tumor(pred: &RegionPrediction, trigger: Trigger) -> Result<bool> {
    Ok(match trigger {
        Trigger::SubtypeArgmax => argmax(pred.head(HEAD_TUMOR_SUBTYPE)?) != SUBTYPE_NORMAL,
        Trigger::Abnormality { threshold } => pred.head(HEAD_ABNORMALITY)?[0] > threshold,
    })
}

/// Image-level labels: tumor-positive if any region is a tumor; a positive
/// image is malignant iff the maximum regional P(malignant) exceeds the
/// threshold, benign otherwise.
pub fn aggregate_image(regions: Vec<RegionPrediction>, thresholds: Thresholds) -> Result<ImagePrediction> {
    if regions.is_empty() {
        return Err(Error::EmptyScope("aggregation needs at least one region prediction".into()));
    }
    let mut tumor_positive = false;
    let mut max_malignant = f64::NEG_INFINITY;
    let mut fracture = false;
    let mut implant = false;
    for r in &regions {
        tumor_positive |= region_is_tumor(r, thresholds.trigger)?;
        max_malignant = max_malignant.max(r.p_malignant()?);
        fracture |= argmax(r.head(HEAD_FRACTURE)?) != FRACTURE_NORMAL;
        implant |= r.head(HEAD_IMPLANT)?[0] > thresholds.implant;
    }
    let malignancy = match (tumor_positive, max_malignant > thresholds.malignant) {
        (false, _) => Malignancy::None,
        (true, true) => Malignancy::Malignant,
        (true, false) => Malignancy::Benign,
    };
    Ok(ImagePrediction {
        tumor_positive,
        malignancy,
        fracture,
        implant,
        regions,
        thresholds,
    })
}
