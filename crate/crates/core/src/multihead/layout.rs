use serde::{Deserialize, Serialize};

use crate::datamodel::TaskKind;
use crate::error::{Error, Result};
use crate::finetune::TaskSpec;
use crate::synthgen::{TASK_ABNORMALITY, TASK_FRACTURE_TYPE, TASK_IMPLANT, TASK_LOCATION, TASK_TUMOR_SUBTYPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Softmax,
}

/// A contiguous slice of the shared logit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGroup {
    pub name: String,
    /// Manifest task supplying this head's labels.
    pub label_key: String,
    pub offset: usize,
    pub arity: usize,
    pub activation: Activation,
    pub classes: Vec<String>,
}

impl HeadGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.arity
    }

    /// Equivalent single-task spec, used for metrics.
    pub fn task(&self) -> TaskSpec {
        let kind = match self.activation {
            Activation::Sigmoid => TaskKind::Binary,
            Activation::Softmax => TaskKind::Multiclass { k: self.arity },
        };
        TaskSpec::new(self.name.clone(), kind, "")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub groups: Vec<HeadGroup>,
}

pub const HEAD_ABNORMALITY: &str = "abnormality";
pub const HEAD_TUMOR_SUBTYPE: &str = "tumor_subtype";
pub const HEAD_LOCATION: &str = "location";
pub const HEAD_FRACTURE: &str = "fracture";
pub const HEAD_IMPLANT: &str = "implant";

/// Index of the malignant class within the tumor-subtype group.
pub const SUBTYPE_MALIGNANT: usize = 0;
/// Index of the normal class within the tumor-subtype group.
pub const SUBTYPE_NORMAL: usize = 3;

impl HeadLayout {
    /// abnormality (1) · tumor subtype (4) · location (29) · fracture (3) ·
    /// implant (1), 38 logits in total.
    pub fn standard() -> Self {
        use crate::synthgen::{FRACTURE_CLASSES, LOCATION_CLASSES, TUMOR_CLASSES};
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let spec = [
            (HEAD_ABNORMALITY, TASK_ABNORMALITY, Activation::Sigmoid, names(&["normal", "abnormal"])),
            (HEAD_TUMOR_SUBTYPE, TASK_TUMOR_SUBTYPE, Activation::Softmax, names(&TUMOR_CLASSES)),
            (HEAD_LOCATION, TASK_LOCATION, Activation::Softmax, names(&LOCATION_CLASSES)),
            (HEAD_FRACTURE, TASK_FRACTURE_TYPE, Activation::Softmax, names(&FRACTURE_CLASSES)),
            (HEAD_IMPLANT, TASK_IMPLANT, Activation::Sigmoid, names(&["absent", "present"])),
        ];
        let mut offset = 0;
        let groups = spec
            .into_iter()
            .map(|(name, key, activation, classes)| {
                let arity = match activation {
                    Activation::Sigmoid => 1,
                    Activation::Softmax => classes.len(),
                };
                let g = HeadGroup {
                    name: name.to_string(),
                    label_key: key.to_string(),
                    offset,
                    arity,
                    activation,
                    classes,
                };
                offset += arity;
                g
            })
            .collect();
        Self { groups }
    }

    pub fn total(&self) -> usize {
        self.groups.last().map_or(0, |g| g.offset + g.arity)
    }

    pub fn group(&self, name: &str) -> Option<&HeadGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for g in &self.groups {
            if g.offset != next || g.arity == 0 {
                return Err(Error::Config(format!("head group {} is not contiguous", g.name)));
            }
            if g.activation == Activation::Sigmoid && g.arity != 1 {
                return Err(Error::Config(format!("sigmoid head {} must have arity 1", g.name)));
            }
            next += g.arity;
        }
        Ok(())
    }

    /// Splits one logit row into per-head probabilities: `[P(positive)]` for
    /// sigmoid heads, a distribution for softmax heads.
    pub fn probabilities(&self, logits: &[f64]) -> Result<Vec<Vec<f64>>> {
        if logits.len() != self.total() {
            return Err(Error::Shape(format!("{} logits for a {}-way layout", logits.len(), self.total())));
        }
        Ok(self
            .groups
            .iter()
            .map(|g| {
                let z = &logits[g.range()];
                match g.activation {
                    Activation::Sigmoid => vec![1.0 / (1.0 + (-z[0]).exp())],
                    Activation::Softmax => {
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.into_iter().map(|v| v / s).collect()
                    }
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout_has_38_contiguous_outputs() {
        let l = HeadLayout::standard();
        l.validate().unwrap();
        assert_eq!(l.total(), 38);
        let arities: Vec<usize> = l.groups.iter().map(|g| g.arity).collect();
        assert_eq!(arities, vec![1, 4, 29, 3, 1]);
        assert_eq!(l.group(HEAD_TUMOR_SUBTYPE).unwrap().classes[SUBTYPE_NORMAL], "normal");
        assert_eq!(l.group(HEAD_TUMOR_SUBTYPE).unwrap().classes[SUBTYPE_MALIGNANT], "malignant");
    }

    #[test]
    fn probabilities_are_normalized() {
        let l = HeadLayout::standard();
        let logits: Vec<f64> = (0..38).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        for (g, p) in l.groups.iter().zip(l.probabilities(&logits).unwrap()) {
            match g.activation {
                Activation::Softmax => assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12),
                Activation::Sigmoid => assert!((0.0..=1.0).contains(&p[0])),
            }
        }
    }
}
