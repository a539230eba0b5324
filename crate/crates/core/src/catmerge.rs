//! Category cleaning: a 1-NN confusion matrix over object-crop embeddings,
//! rule-filtered merge proposals, and relabelling through a merge map.
//!
//! Proposals are only candidates. The final merge map is written by hand and
//! applied with [`apply_merge_map`] / [`apply_merge_map_to_conditionings`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::euclidean;
use crate::store::{ClassId, ClassTable, Conditioning, EmbeddingRecord, EmbeddingSet, ObjectInstance, StoreError};

/// At most this many most-confused classes are considered per target.
pub const MAX_CANDIDATES: usize = 5;

pub const RULE_DIAGONAL: &str = "diagonal-threshold";
pub const RULE_PERSON: &str = "person-exclusion";
pub const RULE_PAIR: &str = "pair-exclusion";
pub const RULE_OTHER: &str = "other-suffix";

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("need at least 2 crops, got {0}")]
    TooFewCrops(usize),
    #[error("row {0} has no object class")]
    MissingClass(usize),
    #[error("rules reference unknown class {0:?}")]
    UnknownClass(String),
    #[error("merge map chains or cycles through {0:?}")]
    Chained(String),
    #[error("confusion matrix is malformed: {0}")]
    Malformed(String),
    #[error("cannot read {path}: {reason}")]
    File { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

/// Row-normalized confusion counts: `matrix[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub matrix: Vec<Vec<f64>>,
    pub support: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.support.len()
    }

    pub fn get(&self, truth: ClassId, predicted: ClassId) -> f64 {
        self.matrix[truth.index()][predicted.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.support.len();
        if self.matrix.len() != c || self.matrix.iter().any(|r| r.len() != c) {
            return Err(MergeError::Malformed(format!("expected a {c}x{c} matrix")));
        }
        for (i, (row, &support)) in self.matrix.iter().zip(&self.support).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(MergeError::Malformed(format!("row {i} has invalid entries")));
            }
            let sum: f64 = row.iter().sum();
            let ok = if support == 0 {
                sum == 0.0
            } else {
                (sum - 1.0).abs() <= 1e-9
            };
            if !ok {
                return Err(MergeError::Malformed(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Predicted class of each crop: the class of its nearest other crop,
/// lowest row index on distance ties.
pub fn one_nn_predictions(crops: &EmbeddingSet) -> Result<Vec<ClassId>> {
    let n = crops.len();
    if n < 2 {
        return Err(MergeError::TooFewCrops(n));
    }
    let classes = crops
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| r.object_class.ok_or(MergeError::MissingClass(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let query = crops.row(i);
            let mut best = (usize::MAX, f64::INFINITY);
            for j in (0..n).filter(|&j| j != i) {
                let d = euclidean(query, crops.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            classes[best.0]
        })
        .collect())
}

/// 1-NN confusion matrix over `num_classes` classes.
pub fn one_nn_confusion(crops: &EmbeddingSet, num_classes: usize) -> Result<ConfusionMatrix> {
    let predicted = one_nn_predictions(crops)?;
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    let mut support = vec![0u64; num_classes];
    for (r, p) in crops.records().iter().zip(&predicted) {
        let t = r.object_class.expect("checked by one_nn_predictions");
        if t.index() >= num_classes || p.index() >= num_classes {
            return Err(StoreError::ClassOutOfRange {
                id: t.0.max(p.0),
                len: num_classes,
            }
            .into());
        }
        counts[t.index()][p.index()] += 1;
        support[t.index()] += 1;
    }
    let matrix = counts
        .iter()
        .zip(&support)
        .map(|(row, &s)| {
            row.iter()
                .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix { matrix, support })
}

/// Filtering rules for merge proposals, as stored in the rule config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    /// Classes never merged with anything.
    #[serde(default = "default_exclude_classes")]
    pub exclude_classes: Vec<String>,
    /// `(target, candidate)` pairs known to be confused for bounding-box
    /// reasons rather than appearance.
    #[serde(default)]
    pub exclude_pairs: Vec<(String, String)>,
    #[serde(default = "default_other_suffix")]
    pub other_suffix: String,
}

fn default_exclude_classes() -> Vec<String> {
    vec!["person".into()]
}

fn default_other_suffix() -> String {
    "-other".into()
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            exclude_classes: default_exclude_classes(),
            exclude_pairs: Vec::new(),
            other_suffix: default_other_suffix(),
        }
    }
}

impl RuleConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDrop {
    pub class: ClassId,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub target: ClassId,
    /// Surviving candidates, most confused first.
    pub candidates: Vec<(ClassId, f64)>,
    pub rule_trace: Vec<RuleDrop>,
}

/// Merge candidates per target class.
///
/// The `MAX_CANDIDATES` columns with the highest non-zero confusion are
/// ranked; those below the diagonal entry are dropped, then excluded classes,
/// excluded pairs, and `-other` stuff classes whose whole superclass is not
/// part of the merge. Every drop is recorded in the proposal's trace.
pub fn propose_merges(cm: &ConfusionMatrix, classes: &ClassTable, rules: &RuleConfig) -> Result<Vec<MergeProposal>> {
    cm.validate()?;
    if cm.classes() != classes.len() {
        return Err(MergeError::Malformed(format!(
            "matrix has {} classes, table has {}",
            cm.classes(),
            classes.len()
        )));
    }
    let resolve = |name: &str| classes.id(name).map_err(|_| MergeError::UnknownClass(name.to_string()));
    let excluded: BTreeSet<ClassId> = rules.exclude_classes.iter().map(|n| resolve(n)).collect::<Result<_>>()?;
    let excluded_pairs: BTreeSet<(ClassId, ClassId)> = rules
        .exclude_pairs
        .iter()
        .map(|(t, c)| Ok((resolve(t)?, resolve(c)?)))
        .collect::<Result<_>>()?;
    let is_other = |c: ClassId| {
        !rules.other_suffix.is_empty() && !classes.is_thing(c) && classes.name(c).ends_with(&rules.other_suffix)
    };

    let mut proposals = Vec::new();
    for target in classes.ids() {
        if cm.support[target.index()] == 0 {
            continue;
        }
        let row = &cm.matrix[target.index()];
        let diagonal = row[target.index()];
        let mut ranked: Vec<(ClassId, f64)> = classes
            .ids()
            .filter(|&c| c != target && row[c.index()] > 0.0)
            .map(|c| (c, row[c.index()]))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(MAX_CANDIDATES);

        let mut trace = Vec::new();
        let mut drop = |class: ClassId, rule: &str| {
            trace.push(RuleDrop {
                class,
                rule: rule.to_string(),
            })
        };
        let mut kept = Vec::new();
        for (c, p) in ranked {
            if p < diagonal {
                drop(c, RULE_DIAGONAL);
            } else if excluded.contains(&c) || excluded.contains(&target) {
                drop(c, RULE_PERSON);
            } else if excluded_pairs.contains(&(target, c)) {
                drop(c, RULE_PAIR);
            } else {
                kept.push((c, p));
            }
        }

        // "-other" classes only merge when their entire superclass does
        let group: BTreeSet<ClassId> = kept.iter().map(|(c, _)| *c).chain([target]).collect();
        let superclass_covered = |o: ClassId| {
            classes
                .ids()
                .filter(|&c| classes.superclass(c) == classes.superclass(o))
                .all(|c| group.contains(&c))
        };
        let target_other_blocked = is_other(target) && !superclass_covered(target);
        let mut candidates = Vec::new();
        for (c, p) in kept {
            let blocked = target_other_blocked || (is_other(c) && !superclass_covered(c));
            if blocked {
                drop(c, RULE_OTHER);
            } else {
                candidates.push((c, p));
            }
        }
        proposals.push(MergeProposal {
            target,
            candidates,
            rule_trace: trace,
        });
    }
    Ok(proposals)
}

/// `from -> to` class relabelling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeMap {
    map: BTreeMap<ClassId, ClassId>,
}

impl MergeMap {
    /// Rejects maps where some value is itself remapped (chains and cycles).
    pub fn new(map: BTreeMap<ClassId, ClassId>) -> Result<Self, (ClassId, ClassId)> {
        for (&from, &to) in &map {
            if let Some(&next) = map.get(&to) {
                if next != to {
                    return Err((from, to));
                }
            }
        }
        Ok(Self { map })
    }

    /// Merge-map file: `{"from_class_name": "to_class_name", ...}`.
    pub fn load(path: impl AsRef<Path>, classes: &ClassTable) -> Result<Self> {
        let names: BTreeMap<String, String> = read_json(path.as_ref())?;
        let mut map = BTreeMap::new();
        for (from, to) in names {
            let f = classes.id(&from).map_err(|_| MergeError::UnknownClass(from.clone()))?;
            let t = classes.id(&to).map_err(|_| MergeError::UnknownClass(to.clone()))?;
            map.insert(f, t);
        }
        Self::new(map).map_err(|(f, _)| MergeError::Chained(classes.name(f).to_string()))
    }

    pub fn apply(&self, class: ClassId) -> ClassId {
        self.map.get(&class).copied().unwrap_or(class)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn apply_merge_map(set: &EmbeddingSet, map: &MergeMap) -> Result<EmbeddingSet> {
    let records = set
        .records()
        .iter()
        .map(|r| EmbeddingRecord {
            object_class: r.object_class.map(|c| map.apply(c)),
            ..r.clone()
        })
        .collect();
    Ok(set.with_records(records)?)
}

/// Relabel every instance; coarse sets are re-derived, instance counts kept.
pub fn apply_merge_map_to_conditionings(conds: &[Conditioning], map: &MergeMap) -> Result<Vec<Conditioning>> {
    conds
        .iter()
        .map(|c| {
            let instances = c
                .instances()
                .iter()
                .map(|i| ObjectInstance {
                    class: map.apply(i.class),
                    bbox: i.bbox,
                })
                .collect();
            Ok(Conditioning::new(c.id(), instances)?)
        })
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let err = |reason: String| MergeError::File {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}
