use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskKind {
    Binary,
    Multiclass { k: usize },
    Regression,
}

impl TaskKind {
    /// Number of classes, `None` for regression.
    pub fn cardinality(&self) -> Option<usize> {
        match self {
            TaskKind::Binary => Some(2),
            TaskKind::Multiclass { k } => Some(*k),
            TaskKind::Regression => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::Regression)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDecl {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
}

/// A label value `y` with its availability flag `m` (`m = 1`: unknown or not
/// applicable, ignored by every loss and metric).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledTarget {
    pub y: f64,
    #[serde(with = "flag")]
    pub m: bool,
}

impl LabeledTarget {
    pub fn known(y: f64) -> Self {
        Self { y, m: false }
    }

    pub fn class(index: usize) -> Self {
        Self::known(index as f64)
    }

    pub fn masked() -> Self {
        Self { y: 0.0, m: true }
    }

    pub fn is_masked(&self) -> bool {
        self.m
    }

    /// Class index for classification tasks; `None` when masked.
    pub fn class_index(&self) -> Option<usize> {
        (!self.m).then_some(self.y as usize)
    }
}

mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u8),
            Bool(bool),
        }
        match Raw::deserialize(d)? {
            Raw::Bool(b) => Ok(b),
            Raw::Int(0) => Ok(false),
            Raw::Int(1) => Ok(true),
            Raw::Int(other) => Err(serde::de::Error::custom(format!(
                "mask flag must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BoxXywh) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> BoxXywh {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BoxXywh::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Ground-truth anatomical region stored with a manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    #[serde(rename = "box")]
    pub bbox: BoxXywh,
    pub location_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_part: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, LabeledTarget>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<RegionAnnotation>,
    /// Optional binary mask image marking the abnormal footprint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl ManifestEntry {
    /// Looks up a grouping/metadata field by name.
    pub fn field(&self, key: &str) -> Option<&str> {
        match key {
            "id" => Some(self.id.as_str()),
            "patient_id" => self.patient_id.as_deref(),
            "body_part" => self.body_part.as_deref(),
            other => self.meta.get(other).map(String::as_str),
        }
    }

    pub fn label(&self, task: &str) -> Option<&LabeledTarget> {
        self.labels.get(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskDecl>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative image paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(tasks: Vec<TaskDecl>, entries: Vec<ManifestEntry>, root: PathBuf) -> Result<Self> {
        let m = Self {
            tasks,
            entries,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn task(&self, id: &str) -> Option<&TaskDecl> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, &ManifestEntry> {
        self.entries.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Restricts the manifest to the listed ids, keeping manifest order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> DatasetManifest {
        DatasetManifest {
            tasks: self.tasks.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| ids.contains(&e.id))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut task_ids = BTreeSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.id.as_str()) {
                return Err(Error::Parse(format!("task \"{}\" declared twice", t.id)));
            }
            if let TaskKind::Multiclass { k } = t.kind {
                if k < 2 {
                    return Err(Error::Parse(format!(
                        "task \"{}\" declares fewer than 2 classes",
                        t.id
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            for (task, target) in &e.labels {
                let decl = self.task(task).ok_or_else(|| Error::UndeclaredTask {
                    task: task.clone(),
                    entry: e.id.clone(),
                })?;
                if target.m {
                    continue;
                }
                if let Some(k) = decl.kind.cardinality() {
                    let y = target.y;
                    if y.fract() != 0.0 || y < 0.0 || y >= k as f64 {
                        return Err(Error::InvalidLabel {
                            task: task.clone(),
                            entry: e.id.clone(),
                            reason: format!("class {y} outside 0..{k}"),
                        });
                    }
                } else if !target.y.is_finite() {
                    return Err(Error::InvalidLabel {
                        task: task.clone(),
                        entry: e.id.clone(),
                        reason: "non-finite regression target".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a manifest; relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    DatasetManifest::from_json(&text, root)
}

/// An image in memory together with its identifiers and labels.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    pub patient_id: Option<String>,
    pub body_part: Option<String>,
    pub labels: BTreeMap<String, LabeledTarget>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Image) -> Self {
        Self {
            id: id.into(),
            pixels,
            patient_id: None,
            body_part: None,
            labels: BTreeMap::new(),
        }
    }
}
