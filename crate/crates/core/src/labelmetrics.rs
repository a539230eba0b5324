//! Label-set metrics: per-image F1 of predicted label sets against coarse
//! conditionings, object classification accuracy, class frequency ranking
//! and per-class manifold metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{self, Manifold, ManifoldError};
use crate::store::{read_jsonl, ClassId, ClassTable, ConditioningMap, EmbeddingSet, Granularity, StoreError};

/// Classes outside the `LONG_TAIL_HEAD` most frequent ones form the long tail.
pub const LONG_TAIL_HEAD: usize = 25;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("conditioning {0:?} not found")]
    UnresolvedConditioning(String),
    #[error("instance {instance} out of range for conditioning {conditioning_id:?}")]
    InstanceOutOfRange { conditioning_id: String, instance: usize },
    #[error("no predictions")]
    Empty,
    #[error("prediction line {0}: exactly one of `labels` or `label` (with `instance`) is required")]
    MalformedPrediction(usize),
    #[error("expected {expected} predictions, found {found}")]
    WrongMode { expected: &'static str, found: &'static str },
    #[error("per-class metrics need object-granularity sets")]
    NotObjectSet,
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    /// Scene mode: predicted label set for a whole image.
    Labels(BTreeSet<ClassId>),
    /// Object mode: predicted class of the crop of `instance`.
    Class { instance: usize, predicted: ClassId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub conditioning_id: String,
    pub seed: u32,
    pub prediction: Prediction,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    conditioning_id: String,
    seed: u32,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    instance: Option<usize>,
}

/// Read predictions. Scene lines are `{conditioning_id, seed, labels}`,
/// object lines `{conditioning_id, seed, instance, label}`.
pub fn load_predictions(path: impl AsRef<Path>, classes: &ClassTable) -> Result<Vec<PredictionRecord>> {
    let mut malformed = None;
    let records = read_jsonl(path.as_ref(), |line_no, line: PredictionLine| {
        let prediction = match (line.labels, line.label, line.instance) {
            (Some(labels), None, None) => Prediction::Labels(
                labels.iter().map(|l| classes.id(l)).collect::<Result<_, StoreError>>()?,
            ),
            (None, Some(label), Some(instance)) => Prediction::Class {
                instance,
                predicted: classes.id(&label)?,
            },
            _ => {
                malformed.get_or_insert(line_no);
                Prediction::Labels(BTreeSet::new())
            }
        };
        Ok(PredictionRecord {
            conditioning_id: line.conditioning_id,
            seed: line.seed,
            prediction,
        })
    })?;
    match malformed {
        Some(line) => Err(LabelError::MalformedPrediction(line)),
        None => Ok(records),
    }
}

/// `2 |P ∩ T| / (|P| + |T|)`, with two empty sets scoring 1.
pub fn f1(predicted: &BTreeSet<ClassId>, target: &BTreeSet<ClassId>) -> f64 {
    let total = predicted.len() + target.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * predicted.intersection(target).count() as f64 / total as f64
}

/// Per-image F1 against the coarse conditioning, averaged over images.
pub fn mean_f1(predictions: &[PredictionRecord], conditionings: &ConditioningMap) -> Result<f64> {
    if predictions.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut sum = 0.0;
    for p in predictions {
        let cond = conditionings
            .get(&p.conditioning_id)
            .ok_or_else(|| LabelError::UnresolvedConditioning(p.conditioning_id.clone()))?;
        let Prediction::Labels(labels) = &p.prediction else {
            return Err(LabelError::WrongMode {
                expected: "scene",
                found: "object",
            });
        };
        sum += f1(labels, cond.coarse());
    }
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of correct crops (headline value).
    pub acc_instance: f64,
    /// Mean over ground-truth classes of per-class accuracy.
    pub acc_class_balanced: f64,
}

pub fn object_accuracy(predictions: &[PredictionRecord], conditionings: &ConditioningMap) -> Result<Accuracy> {
    if predictions.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut per_class: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for p in predictions {
        let cond = conditionings
            .get(&p.conditioning_id)
            .ok_or_else(|| LabelError::UnresolvedConditioning(p.conditioning_id.clone()))?;
        let Prediction::Class { instance, predicted } = p.prediction else {
            return Err(LabelError::WrongMode {
                expected: "object",
                found: "scene",
            });
        };
        let target = cond
            .instances()
            .get(instance)
            .ok_or_else(|| LabelError::InstanceOutOfRange {
                conditioning_id: p.conditioning_id.clone(),
                instance,
            })?
            .class;
        let hit = (predicted == target) as usize;
        correct += hit;
        let e = per_class.entry(target).or_default();
        e.0 += hit;
        e.1 += 1;
    }
    let balanced =
        per_class.values().map(|&(c, n)| c as f64 / n as f64).sum::<f64>() / per_class.len() as f64;
    Ok(Accuracy {
        acc_instance: correct as f64 / predictions.len() as f64,
        acc_class_balanced: balanced,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopClasses {
    pub classes: Vec<ClassId>,
    /// Fewer than `k` distinct classes were available.
    pub truncated: bool,
}

fn top_k_from_counts(counts: BTreeMap<ClassId, u64>, k: usize) -> Result<TopClasses> {
    if counts.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut ranked: Vec<(ClassId, u64)> = counts.into_iter().collect();
    // count descending, class index ascending
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = ranked.len() < k;
    Ok(TopClasses {
        classes: ranked.into_iter().take(k).map(|(c, _)| c).collect(),
        truncated,
    })
}

/// The `k` classes with the most object instances.
pub fn top_k_classes<'a>(
    conditionings: impl IntoIterator<Item = &'a crate::store::Conditioning>,
    k: usize,
) -> Result<TopClasses> {
    let mut counts = BTreeMap::new();
    for cond in conditionings {
        for inst in cond.instances() {
            *counts.entry(inst.class).or_insert(0u64) += 1;
        }
    }
    top_k_from_counts(counts, k)
}

/// The `k` classes with the most object-granularity rows.
pub fn top_k_classes_from_records(set: &EmbeddingSet, k: usize) -> Result<TopClasses> {
    let mut counts = BTreeMap::new();
    for class in set.records().iter().filter_map(|r| r.object_class) {
        *counts.entry(class).or_insert(0u64) += 1;
    }
    top_k_from_counts(counts, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub consistency: f64,
    pub n_generated: usize,
    pub n_real: usize,
}

/// Inputs shared by every per-class computation.
#[derive(Debug, Clone, Copy)]
pub struct PerClassInputs<'a> {
    pub generated: &'a EmbeddingSet,
    pub real: &'a EmbeddingSet,
    pub real_manifold: &'a Manifold,
    pub generated_manifold: &'a Manifold,
    pub conditionings: &'a ConditioningMap,
}

/// Precision, recall and consistency with the query rows restricted to one
/// class at a time; manifolds are left whole. Classes without rows on either
/// side are absent from the result.
pub fn per_class_report(inputs: PerClassInputs<'_>, class_filter: &[ClassId]) -> Result<BTreeMap<ClassId, ClassMetrics>> {
    let is_object = |s: &EmbeddingSet| s.records().iter().all(|r| r.granularity == Granularity::Object);
    if !is_object(inputs.generated) || !is_object(inputs.real) {
        return Err(LabelError::NotObjectSet);
    }
    let mut out = BTreeMap::new();
    for &class in class_filter {
        let gen_c = inputs.generated.filter(|r| r.object_class == Some(class));
        let real_c = inputs.real.filter(|r| r.object_class == Some(class));
        if gen_c.is_empty() || real_c.is_empty() {
            continue;
        }
        out.insert(
            class,
            ClassMetrics {
                precision: manifold::precision(&gen_c, inputs.real_manifold)?,
                recall: manifold::recall(&real_c, inputs.generated_manifold)?,
                consistency: manifold::consistency(&gen_c, inputs.real_manifold, inputs.conditionings)?,
                n_generated: gen_c.len(),
                n_real: real_c.len(),
            },
        );
    }
    Ok(out)
}
