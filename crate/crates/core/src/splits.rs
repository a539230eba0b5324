//! Evaluation splits: seen / unseen-finegrained / unseen-coarse / validation
//! partition, class histograms and long-tail statistics, and
//! class-distribution matched subsampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{BBox, ClassId, Conditioning, EmbeddingSet, ObjectInstance, StoreError};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("conditioning {0:?} appears more than once")]
    DuplicateId(String),
    #[error("conditioning {0:?} is in both the train and eval lists")]
    Overlap(String),
    #[error("validation size {requested} exceeds the {available} eval conditionings with seen label sets")]
    ValidationTooLarge { requested: usize, available: usize },
    #[error("subsample size {requested} exceeds source size {available}")]
    SizeTooLarge { requested: usize, available: usize },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("split assignment violates its invariants: {0}")]
    Violation(String),
    #[error("cannot read split file {path}: {reason}")]
    SplitFile { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = SplitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    UnseenFg,
    UnseenCoarse,
    Validation,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Seen, Split::UnseenFg, Split::UnseenCoarse, Split::Validation];

    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::UnseenFg => "unseen_fg",
            Split::UnseenCoarse => "unseen_coarse",
            Split::Validation => "validation",
        }
    }
}

/// Split membership of every conditioning, keyed by id. Serialized as a flat
/// JSON object `{conditioning_id: split_name}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |reason: String| SplitError::SplitFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split assignment serializes");
        std::fs::write(path, text + "\n").map_err(|e| SplitError::SplitFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>, seen: &mut HashSet<&'a str>) -> Result<()> {
    for id in ids {
        if !seen.insert(id) {
            return Err(SplitError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Assign every train conditioning to `seen`; eval conditionings whose
/// label set never occurs in train go to `unseen_coarse`; of the rest,
/// `validation_size` drawn uniformly with `rng_seed` go to `validation` and
/// the remainder to `unseen_fg`.
pub fn partition(
    train: &[Conditioning],
    eval: &[Conditioning],
    validation_size: usize,
    rng_seed: u64,
) -> Result<SplitAssignment> {
    let mut train_ids = HashSet::new();
    check_unique(train.iter().map(|c| c.id()), &mut train_ids)?;
    let mut eval_ids = HashSet::new();
    check_unique(eval.iter().map(|c| c.id()), &mut eval_ids)?;
    if let Some(id) = eval_ids.iter().find(|id| train_ids.contains(*id)) {
        return Err(SplitError::Overlap(id.to_string()));
    }

    let seen_coarse: HashSet<&BTreeSet<ClassId>> = train.iter().map(|c| c.coarse()).collect();
    let mut assignment: BTreeMap<String, Split> =
        train.iter().map(|c| (c.id().to_string(), Split::Seen)).collect();

    // sorted so the draw does not depend on input order
    let mut eval_sorted: Vec<&Conditioning> = eval.iter().collect();
    eval_sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut seen_combo = Vec::new();
    for c in eval_sorted {
        if seen_coarse.contains(c.coarse()) {
            seen_combo.push(c.id());
        } else {
            assignment.insert(c.id().to_string(), Split::UnseenCoarse);
        }
    }
    if validation_size > seen_combo.len() {
        return Err(SplitError::ValidationTooLarge {
            requested: validation_size,
            available: seen_combo.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    seen_combo.shuffle(&mut rng);
    for (i, id) in seen_combo.into_iter().enumerate() {
        let split = if i < validation_size {
            Split::Validation
        } else {
            Split::UnseenFg
        };
        assignment.insert(id.to_string(), split);
    }
    Ok(SplitAssignment { assignment })
}

/// Check a split assignment against the conditionings it was built from,
/// recomputing label-set membership from the raw instances.
pub fn validate_assignment(assignment: &SplitAssignment, train: &[Conditioning], eval: &[Conditioning]) -> Result<()> {
    let labels = |c: &Conditioning| {
        let mut v: Vec<u32> = c.instances().iter().map(|i| i.class.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let seen: Vec<(&str, Vec<u32>)> = train
        .iter()
        .chain(eval)
        .filter(|c| assignment.get(c.id()) == Some(Split::Seen))
        .map(|c| (c.id(), labels(c)))
        .collect();
    let violation = |msg: String| Err(SplitError::Violation(msg));

    for c in train {
        if assignment.get(c.id()) != Some(Split::Seen) {
            return violation(format!("train conditioning {:?} is not seen", c.id()));
        }
    }
    for c in eval {
        let l = labels(c);
        let combo_seen = seen.iter().any(|(_, s)| *s == l);
        let id_seen = seen.iter().any(|(id, _)| *id == c.id());
        match assignment.get(c.id()) {
            None => return violation(format!("{:?} is unassigned", c.id())),
            Some(Split::Seen) => return violation(format!("eval conditioning {:?} is seen", c.id())),
            Some(Split::UnseenCoarse) if combo_seen => {
                return violation(format!("unseen_coarse {:?} has a seen label set", c.id()))
            }
            Some(Split::UnseenFg) | Some(Split::Validation) if !combo_seen || id_seen => {
                return violation(format!("{:?} does not have a seen label set with an unseen layout", c.id()))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Every object instance counts.
    #[default]
    Instances,
    /// Each class counts once per conditioning.
    Images,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<ClassId, u64>,
    pub total: u64,
}

impl ClassHistogram {
    pub fn add_conditioning(&mut self, cond: &Conditioning, mode: CountMode) {
        match mode {
            CountMode::Instances => {
                for inst in cond.instances() {
                    *self.counts.entry(inst.class).or_insert(0) += 1;
                    self.total += 1;
                }
            }
            CountMode::Images => {
                for &class in cond.coarse() {
                    *self.counts.entry(class).or_insert(0) += 1;
                    self.total += 1;
                }
            }
        }
    }

    pub fn count(&self, class: ClassId) -> u64 {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    /// Normalized frequencies.
    pub fn normalized(&self) -> BTreeMap<ClassId, f64> {
        self.counts
            .iter()
            .map(|(&c, &n)| (c, n as f64 / self.total as f64))
            .collect()
    }
}

impl std::ops::Add for &ClassHistogram {
    type Output = ClassHistogram;

    fn add(self, other: &ClassHistogram) -> ClassHistogram {
        let mut out = self.clone();
        for (&c, &n) in &other.counts {
            *out.counts.entry(c).or_insert(0) += n;
        }
        out.total += other.total;
        out
    }
}

pub fn class_histogram<'a>(conds: impl IntoIterator<Item = &'a Conditioning>, mode: CountMode) -> ClassHistogram {
    let mut h = ClassHistogram::default();
    for c in conds {
        h.add_conditioning(c, mode);
    }
    h
}

/// Share of counts falling outside `head`.
pub fn long_tail_fraction(hist: &ClassHistogram, head: &[ClassId]) -> Result<f64> {
    if hist.total == 0 {
        return Err(SplitError::EmptyHistogram);
    }
    let head: BTreeSet<ClassId> = head.iter().copied().collect();
    let in_head: u64 = head.iter().map(|&c| hist.count(c)).sum();
    Ok((hist.total - in_head) as f64 / hist.total as f64)
}

/// L1 distance between normalized histograms as an exact fraction
/// `num / den`, so that ties between candidates are detected exactly.
#[derive(Debug, Clone, Copy)]
struct L1Ratio {
    num: u128,
    den: u128,
}

impl L1Ratio {
    fn lt(&self, other: &L1Ratio) -> bool {
        self.num * other.den < other.num * self.den
    }

    fn eq(&self, other: &L1Ratio) -> bool {
        self.num * other.den == other.num * self.den
    }

    fn value(&self) -> f64 {
        if self.num == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

fn l1_ratio(counts: &[u64], total: u64, target: &[u64], target_total: u64) -> L1Ratio {
    let (t, tt) = (total as u128, target_total as u128);
    let num = counts
        .iter()
        .zip(target)
        .map(|(&c, &g)| (c as u128 * tt).abs_diff(g as u128 * t))
        .sum();
    L1Ratio { num, den: t * tt }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSubsample {
    /// Selected conditioning ids, in selection order.
    pub ids: Vec<String>,
    /// L1 distance between the final normalized histogram and the target.
    pub l1: f64,
}

/// Greedily pick `size` conditionings from `source` so that their class
/// histogram tracks `target`: each step adds the candidate minimizing the L1
/// distance between normalized histograms after inclusion, breaking exact
/// ties uniformly at random with `rng_seed`.
pub fn subsample_matched(
    source: &[Conditioning],
    target: &ClassHistogram,
    size: usize,
    rng_seed: u64,
    mode: CountMode,
) -> Result<MatchedSubsample> {
    if size > source.len() {
        return Err(SplitError::SizeTooLarge {
            requested: size,
            available: source.len(),
        });
    }
    if target.total == 0 {
        return Err(SplitError::EmptyHistogram);
    }
    let universe = source
        .iter()
        .flat_map(|c| c.instances().iter().map(|i| i.class.index()))
        .chain(target.counts.keys().map(|c| c.index()))
        .max()
        .map_or(0, |m| m + 1);
    let dense = |h: &ClassHistogram| {
        let mut v = vec![0u64; universe];
        for (&c, &n) in &h.counts {
            v[c.index()] = n;
        }
        v
    };
    let target_dense = dense(target);
    let items: Vec<(Vec<u64>, u64)> = source
        .iter()
        .map(|c| {
            let h = class_histogram([c], mode);
            (dense(&h), h.total)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut taken = vec![false; source.len()];
    let mut counts = vec![0u64; universe];
    let mut total = 0u64;
    let mut ids = Vec::with_capacity(size);
    let mut current = L1Ratio { num: 0, den: 1 };

    for _ in 0..size {
        let scores: Vec<Option<L1Ratio>> = items
            .par_iter()
            .enumerate()
            .map(|(i, (item, item_total))| {
                if taken[i] {
                    return None;
                }
                let merged: Vec<u64> = counts.iter().zip(item).map(|(a, b)| a + b).collect();
                Some(l1_ratio(&merged, total + item_total, &target_dense, target.total))
            })
            .collect();
        let mut best: Option<L1Ratio> = None;
        let mut ties = Vec::new();
        for (i, score) in scores.iter().enumerate() {
            let Some(score) = score else { continue };
            match best {
                Some(b) if score.eq(&b) => ties.push(i),
                Some(b) if !score.lt(&b) => {}
                _ => {
                    best = Some(*score);
                    ties.clear();
                    ties.push(i);
                }
            }
        }
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.random_range(0..ties.len())]
        };
        taken[pick] = true;
        for (c, n) in counts.iter_mut().zip(&items[pick].0) {
            *c += n;
        }
        total += items[pick].1;
        current = best.expect("a candidate remains while size <= |source|");
        ids.push(source[pick].id().to_string());
    }
    let l1 = if size == 0 {
        // empty selection: distance from an all-zero histogram
        2.0
    } else {
        current.value()
    };
    Ok(MatchedSubsample { ids, l1 })
}

/// Single-instance pseudo-conditionings, one per object row of a crop set,
/// for object-level matched subsampling. Ids are `"<conditioning_id>#<row>"`.
pub fn crop_pseudo_conditionings(crops: &EmbeddingSet) -> Result<Vec<Conditioning>> {
    let full = BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };
    crops
        .records()
        .iter()
        .enumerate()
        .filter_map(|(row, r)| r.object_class.map(|class| (row, r, class)))
        .map(|(row, r, class)| {
            Ok(Conditioning::new(
                format!("{}#{row}", r.conditioning_id),
                vec![ObjectInstance { class, bbox: full }],
            )?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(id: &str, classes: &[u32]) -> Conditioning {
        let b = BBox { x: 0.0, y: 0.0, w: 0.5, h: 0.5 };
        Conditioning::new(id, classes.iter().map(|&c| ObjectInstance { class: ClassId(c), bbox: b }).collect()).unwrap()
    }

    fn hist(pairs: &[(u32, u64)]) -> ClassHistogram {
        ClassHistogram {
            counts: pairs.iter().map(|&(c, n)| (ClassId(c), n)).collect(),
            total: pairs.iter().map(|p| p.1).sum(),
        }
    }

    #[test]
    fn partition_small_example() {
        let train = vec![cond("t0", &[0, 1])];
        let eval = vec![cond("e0", &[1, 0, 0]), cond("e1", &[0, 2])];
        let a = partition(&train, &eval, 0, 0).unwrap();
        assert_eq!(a.get("t0"), Some(Split::Seen));
        assert_eq!(a.get("e0"), Some(Split::UnseenFg));
        assert_eq!(a.get("e1"), Some(Split::UnseenCoarse));
        validate_assignment(&a, &train, &eval).unwrap();
    }

    #[test]
    fn partition_validation_boundary() {
        let train = vec![cond("t0", &[0])];
        let eval = vec![cond("e0", &[0]), cond("e1", &[0]), cond("e2", &[1])];
        let a = partition(&train, &eval, 2, 9).unwrap();
        assert_eq!(a.count(Split::UnseenFg), 0);
        assert_eq!(a.count(Split::Validation), 2);
        assert!(matches!(
            partition(&train, &eval, 3, 9),
            Err(SplitError::ValidationTooLarge { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn partition_rejects_overlap_and_duplicates() {
        let train = vec![cond("x", &[0])];
        assert!(matches!(partition(&train, &[cond("x", &[0])], 0, 0), Err(SplitError::Overlap(_))));
        assert!(matches!(
            partition(&[cond("y", &[0]), cond("y", &[1])], &[], 0, 0),
            Err(SplitError::DuplicateId(_))
        ));
    }

    #[test]
    fn validator_catches_mislabels() {
        let train = vec![cond("t0", &[0])];
        let eval = vec![cond("e0", &[0]), cond("e1", &[1])];
        let mut a = partition(&train, &eval, 0, 0).unwrap();
        a.assignment.insert("e1".into(), Split::UnseenFg);
        assert!(validate_assignment(&a, &train, &eval).is_err());
        let mut b = partition(&train, &eval, 0, 0).unwrap();
        b.assignment.insert("e0".into(), Split::UnseenCoarse);
        assert!(validate_assignment(&b, &train, &eval).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let a = partition(&[cond("t", &[0])], &[cond("u", &[1])], 0, 0).unwrap();
        a.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"u\": \"unseen_coarse\""));
        assert_eq!(SplitAssignment::load(&path).unwrap(), a);
    }

    #[test]
    fn histogram_counts_instances() {
        let h = class_histogram(&[cond("x", &[0, 0, 1])], CountMode::Instances);
        assert_eq!(h, hist(&[(0, 2), (1, 1)]));
        let img = class_histogram(&[cond("x", &[0, 0, 1])], CountMode::Images);
        assert_eq!(img, hist(&[(0, 1), (1, 1)]));
        assert_eq!(class_histogram(&[], CountMode::Instances).total, 0);
    }

    #[test]
    fn long_tail_cases() {
        let h = hist(&[(0, 3), (1, 1)]);
        assert_eq!(long_tail_fraction(&h, &[ClassId(0)]).unwrap(), 0.25);
        assert_eq!(long_tail_fraction(&h, &[ClassId(0), ClassId(1)]).unwrap(), 0.0);
        assert_eq!(long_tail_fraction(&h, &[]).unwrap(), 1.0);
        assert!(long_tail_fraction(&ClassHistogram::default(), &[]).is_err());
    }

    #[test]
    fn subsample_selects_everything_for_own_histogram() {
        let source = vec![cond("a", &[0, 1]), cond("b", &[1]), cond("c", &[2, 2])];
        let target = class_histogram(&source, CountMode::Instances);
        let r = subsample_matched(&source, &target, 3, 1, CountMode::Instances).unwrap();
        assert_eq!(r.l1, 0.0);
        let mut ids = r.ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn subsample_small_optimum() {
        let source = vec![cond("a1", &[0]), cond("a2", &[0]), cond("b", &[1])];
        let target = hist(&[(0, 1), (1, 1)]);
        for seed in 0..10 {
            let r = subsample_matched(&source, &target, 2, seed, CountMode::Instances).unwrap();
            assert_eq!(r.l1, 0.0);
            assert!(r.ids.contains(&"b".to_string()));
            assert!(r.ids.iter().any(|id| id.starts_with('a')));
        }
        assert!(matches!(
            subsample_matched(&source, &target, 4, 0, CountMode::Instances),
            Err(SplitError::SizeTooLarge { .. })
        ));
    }

    #[test]
    fn crop_pseudo_conditionings_are_single_instance() {
        use crate::store::{EmbeddingRecord, Kind};
        let set = EmbeddingSet::new(
            1,
            vec![0.0, 1.0, 2.0],
            vec![
                EmbeddingRecord::object("s", 0, Kind::Real, ClassId(2)),
                EmbeddingRecord::scene("s", 0, Kind::Real),
                EmbeddingRecord::object("t", 0, Kind::Real, ClassId(0)),
            ],
        )
        .unwrap();
        let pseudo = crop_pseudo_conditionings(&set).unwrap();
        assert_eq!(pseudo.len(), 2);
        assert_eq!(pseudo[0].id(), "s#0");
        assert_eq!(pseudo[1].coarse().iter().copied().collect::<Vec<_>>(), vec![ClassId(0)]);
    }
}
