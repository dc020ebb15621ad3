use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, TaskDecl, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SigmoidBce,
    SoftmaxCe,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    /// Higher is better.
    Auroc,
    /// Lower is better.
    Mae,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::Auroc => "auroc",
            SelectionMetric::Mae => "mae",
        }
    }

    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionMetric::Auroc => candidate > incumbent,
            SelectionMetric::Mae => candidate < incumbent,
        }
    }
}

/// A downstream task: label source, output kind, loss and checkpoint
/// selection rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub loss: LossKind,
    pub selection: SelectionMetric,
    /// Manifest task whose labels train this task; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_key: Option<String>,
    #[serde(default)]
    pub description: String,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, kind: TaskKind, description: impl Into<String>) -> Self {
        let (loss, selection) = match kind {
            TaskKind::Binary => (LossKind::SigmoidBce, SelectionMetric::Auroc),
            TaskKind::Multiclass { .. } => (LossKind::SoftmaxCe, SelectionMetric::Auroc),
            TaskKind::Regression => (LossKind::Mse, SelectionMetric::Mae),
        };
        Self {
            id: id.into(),
            kind,
            loss,
            selection,
            label_key: None,
            description: description.into(),
        }
    }

    pub fn from_decl(decl: &TaskDecl) -> Self {
        Self::new(decl.id.clone(), decl.kind, "")
    }

    pub fn label_key(&self) -> &str {
        self.label_key.as_deref().unwrap_or(&self.id)
    }

    /// Number of model outputs: 1 for binary and regression, K otherwise.
    pub fn arity(&self) -> usize {
        match self.kind {
            TaskKind::Multiclass { k } => k,
            _ => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        self.kind.is_classification()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.kind, self.loss, self.selection),
            (TaskKind::Binary, LossKind::SigmoidBce, SelectionMetric::Auroc)
                | (TaskKind::Multiclass { .. }, LossKind::SoftmaxCe, SelectionMetric::Auroc)
                | (TaskKind::Regression, LossKind::Mse, SelectionMetric::Mae)
        );
        if !ok {
            return Err(Error::Config(format!(
                "task {} pairs {:?} with {:?} and {:?}",
                self.id, self.kind, self.loss, self.selection
            )));
        }
        Ok(())
    }
}

/// The twelve downstream tasks of the benchmark protocol, keyed by
/// canonical id.
pub fn register_builtin_tasks() -> BTreeMap<String, TaskSpec> {
    use TaskKind::*;
    let specs = [
        ("wrist-ao", Multiclass { k: 10 }, "pediatric wrist fracture AO subtype, ten most frequent categories"),
        ("wrist-fracture", Binary, "pediatric wrist fracture presence"),
        ("fracture", Binary, "fracture presence"),
        ("abnormality", Binary, "abnormal versus normal study"),
        ("tumor-subtype", Multiclass { k: 9 }, "bone tumor subtype, nine classes"),
        ("tumor-malignancy", Binary, "malignant versus benign bone tumor"),
        ("tumor-presence", Binary, "bone tumor presence"),
        ("oa-kl", Multiclass { k: 5 }, "knee osteoarthritis Kellgren-Lawrence grade 0-4"),
        ("bone-age", Regression, "bone age in months"),
        ("pes-planus", Binary, "flat foot"),
        ("wrist-implant", Binary, "pediatric wrist implant or cast presence"),
        ("implant", Binary, "orthopedic implant presence"),
    ];
    specs
        .into_iter()
        .map(|(id, kind, d)| (id.to_string(), TaskSpec::new(id, kind, d)))
        .collect()
}

fn canonical(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase().replace('_', "-");
    let stripped = ["-10class", "-9class", "-5class", "-regression"]
        .iter()
        .find_map(|suffix| lower.strip_suffix(suffix))
        .map(str::to_string)
        .unwrap_or(lower);
    stripped
}

/// Case-insensitive lookup in the built-in registry; accepts the
/// class-count suffixed spellings such as `OA-KL-5class`.
pub fn lookup_task(name: &str) -> Result<TaskSpec> {
    register_builtin_tasks()
        .remove(&canonical(name))
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}

/// Resolves `name` against the registry and the manifest declarations. A
/// built-in task must agree with the manifest's declaration when both
/// exist; tasks only the manifest declares are derived from it.
pub fn resolve_task(name: &str, manifest: &DatasetManifest) -> Result<TaskSpec> {
    let declared = manifest.task(name).or_else(|| {
        let c = canonical(name);
        manifest.tasks.iter().find(|t| canonical(&t.id) == c)
    });
    match (lookup_task(name), declared) {
        (Ok(mut spec), Some(decl)) => {
            if spec.kind != decl.kind {
                return Err(Error::Config(format!(
                    "task {} is {:?} in the registry but {:?} in the manifest",
                    spec.id, spec.kind, decl.kind
                )));
            }
            if decl.id != spec.id {
                spec.label_key = Some(decl.id.clone());
            }
            Ok(spec)
        }
        (Ok(spec), None) => Err(Error::Config(format!(
            "manifest declares no labels for task {}",
            spec.id
        ))),
        (Err(_), Some(decl)) => Ok(TaskSpec::from_decl(decl)),
        (Err(e), None) => Err(e),
    }
}
