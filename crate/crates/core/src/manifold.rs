//! k-NN hypersphere manifolds and the precision, recall and consistency
//! metrics built on them.
//!
//! A manifold is the union of spheres centred on reference embeddings, each
//! reaching the k-th nearest neighbour of its centre within a radius pool.
//! The pool may be larger than the reference set: split-level manifolds use
//! radii estimated over every split while membership is tested only against
//! the split's own points.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::store::{ClassId, ConditioningMap, EmbeddingRecord, EmbeddingSet, Granularity, StoreError};

/// Neighbourhood size used unless overridden.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("k must be positive")]
    ZeroK,
    #[error("radius pool has {pool} usable rows, need at least {needed} for k={k}")]
    PoolTooSmall { pool: usize, needed: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("target row {0} does not match its declared pool row")]
    TargetNotInPool(usize),
    #[error("radii must be finite and non-negative, one per point ({0})")]
    InvalidRadii(String),
    #[error("query set is empty")]
    EmptyQuery,
    #[error("conditioning {0:?} not found")]
    UnresolvedConditioning(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = ManifoldError> = std::result::Result<T, E>;

/// Euclidean distance: squared differences accumulated in `f64` in index
/// order, then a square root. Every nearest-neighbour routine in the crate
/// goes through this function so results are reproducible bit for bit.
#[inline]
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// How the target rows relate to the radius pool.
#[derive(Debug, Clone, Copy)]
pub enum RadiusPool<'a> {
    /// The pool is the target set itself.
    Targets,
    /// Target row `i` is pool row `rows[i]`; that row is skipped when ranking
    /// neighbours of target `i`.
    Containing { pool: &'a EmbeddingSet, rows: &'a [usize] },
    /// No target occurs in the pool.
    Disjoint(&'a EmbeddingSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    dim: usize,
    points: Vec<f32>,
    radii: Vec<f64>,
    record_refs: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MembershipResult {
    pub inside: bool,
    /// Nearest covering reference point, lowest index on ties.
    pub nearest_covering_ref: Option<usize>,
}

impl Manifold {
    /// Manifold over `set` with externally supplied radii.
    pub fn new(set: &EmbeddingSet, radii: Vec<f64>) -> Result<Self> {
        if radii.len() != set.len() {
            return Err(ManifoldError::InvalidRadii(format!(
                "{} radii for {} points",
                radii.len(),
                set.len()
            )));
        }
        if let Some(r) = radii.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(ManifoldError::InvalidRadii(format!("radius {r}")));
        }
        Ok(Self {
            dim: set.dim(),
            points: set.vectors().to_vec(),
            radii,
            record_refs: set.records().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn record_refs(&self) -> &[EmbeddingRecord] {
        &self.record_refs
    }

    pub fn membership(&self, query: &[f32]) -> Result<MembershipResult> {
        if query.len() != self.dim {
            return Err(ManifoldError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(self.membership_unchecked(query))
    }

    fn membership_unchecked(&self, query: &[f32]) -> MembershipResult {
        let mut best: Option<(usize, f64)> = None;
        for (i, &radius) in self.radii.iter().enumerate() {
            let d = euclidean(query, self.point(i));
            if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        MembershipResult {
            inside: best.is_some(),
            nearest_covering_ref: best.map(|(i, _)| i),
        }
    }

    /// Membership of every row of `set`, in row order.
    pub fn memberships(&self, set: &EmbeddingSet) -> Result<Vec<MembershipResult>> {
        if set.dim() != self.dim {
            return Err(ManifoldError::DimMismatch {
                expected: self.dim,
                found: set.dim(),
            });
        }
        Ok((0..set.len())
            .into_par_iter()
            .map(|i| self.membership_unchecked(set.row(i)))
            .collect())
    }
}

/// Free-function form of [`Manifold::membership`].
pub fn membership(query: &[f32], manifold: &Manifold) -> Result<MembershipResult> {
    manifold.membership(query)
}

/// Build the manifold over `targets`, each radius being the distance to the
/// k-th nearest pool point other than the target itself.
pub fn compute_radii(targets: &EmbeddingSet, pool: RadiusPool<'_>, k: usize) -> Result<Manifold> {
    if k == 0 {
        return Err(ManifoldError::ZeroK);
    }
    let (pool_set, self_rows): (&EmbeddingSet, Option<Vec<usize>>) = match pool {
        RadiusPool::Targets => (targets, Some((0..targets.len()).collect())),
        RadiusPool::Containing { pool, rows } => {
            if rows.len() != targets.len() {
                return Err(ManifoldError::InvalidRadii(format!(
                    "{} pool rows declared for {} targets",
                    rows.len(),
                    targets.len()
                )));
            }
            (pool, Some(rows.to_vec()))
        }
        RadiusPool::Disjoint(pool) => (pool, None),
    };
    if pool_set.dim() != targets.dim() {
        return Err(ManifoldError::DimMismatch {
            expected: targets.dim(),
            found: pool_set.dim(),
        });
    }
    if let Some(rows) = &self_rows {
        for (i, &row) in rows.iter().enumerate() {
            let same = row < pool_set.len()
                && pool_set.row(row) == targets.row(i)
                && pool_set.record(row) == targets.record(i);
            if !same {
                return Err(ManifoldError::TargetNotInPool(i));
            }
        }
    }
    if !targets.is_empty() {
        let needed = if self_rows.is_some() { k + 1 } else { k };
        if pool_set.len() < needed {
            return Err(ManifoldError::PoolTooSmall {
                pool: pool_set.len(),
                needed,
                k,
            });
        }
    }

    let radii = (0..targets.len())
        .into_par_iter()
        .map(|i| {
            let skip = self_rows.as_ref().map(|rows| rows[i]);
            kth_nearest(targets.row(i), pool_set, skip, k)
        })
        .collect();
    Manifold::new(targets, radii)
}

/// Radii for `parts[target]` pooled over all of `parts` stacked in order.
pub fn pooled_radii(parts: &[&EmbeddingSet], target: usize, k: usize) -> Result<Manifold> {
    let pool = EmbeddingSet::concat(parts)?;
    let offset: usize = parts[..target].iter().map(|p| p.len()).sum();
    let rows: Vec<usize> = (offset..offset + parts[target].len()).collect();
    compute_radii(parts[target], RadiusPool::Containing { pool: &pool, rows: &rows }, k)
}

/// k-th smallest distance from `query` to the pool, skipping row `skip`.
fn kth_nearest(query: &[f32], pool: &EmbeddingSet, skip: Option<usize>, k: usize) -> f64 {
    // ascending, at most k entries
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for (j, row) in pool.rows().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let d = euclidean(query, row);
        if best.len() == k && d >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|&b| b <= d);
        best.insert(pos, d);
        best.truncate(k);
    }
    best[k - 1]
}

fn covered_fraction(queries: &EmbeddingSet, manifold: &Manifold) -> Result<f64> {
    if queries.is_empty() {
        return Err(ManifoldError::EmptyQuery);
    }
    let inside = manifold.memberships(queries)?.iter().filter(|m| m.inside).count();
    Ok(inside as f64 / queries.len() as f64)
}

/// Fraction of generated rows inside the real manifold.
pub fn precision(generated: &EmbeddingSet, real_manifold: &Manifold) -> Result<f64> {
    covered_fraction(generated, real_manifold)
}

/// Fraction of real rows inside the generated manifold.
pub fn recall(real: &EmbeddingSet, generated_manifold: &Manifold) -> Result<f64> {
    covered_fraction(real, generated_manifold)
}

/// Class labels a row stands for: the coarse set of its conditioning for
/// full scenes, the crop's own class for objects.
pub fn label_set(record: &EmbeddingRecord, conditionings: &ConditioningMap) -> Result<BTreeSet<ClassId>> {
    let cond = conditionings
        .get(&record.conditioning_id)
        .ok_or_else(|| ManifoldError::UnresolvedConditioning(record.conditioning_id.clone()))?;
    Ok(match (record.granularity, record.object_class) {
        (Granularity::Object, Some(class)) => BTreeSet::from([class]),
        _ => cond.coarse().clone(),
    })
}

/// Intersection over union of two label sets; two empty sets score 1.
pub fn iou(a: &BTreeSet<ClassId>, b: &BTreeSet<ClassId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-row consistency scores: 0 outside the manifold, otherwise the IoU
/// between the row's labels and those of its nearest covering real point.
pub fn consistency_scores(
    generated: &EmbeddingSet,
    real_manifold: &Manifold,
    conditionings: &ConditioningMap,
) -> Result<Vec<f64>> {
    // resolve everything up front so errors do not depend on geometry
    let gen_labels = generated
        .records()
        .iter()
        .map(|r| label_set(r, conditionings))
        .collect::<Result<Vec<_>>>()?;
    let ref_labels = real_manifold
        .record_refs()
        .iter()
        .map(|r| label_set(r, conditionings))
        .collect::<Result<Vec<_>>>()?;
    let members = real_manifold.memberships(generated)?;
    Ok(members
        .iter()
        .zip(&gen_labels)
        .map(|(m, labels)| match m.nearest_covering_ref {
            Some(r) => iou(labels, &ref_labels[r]),
            None => 0.0,
        })
        .collect())
}

/// Mean consistency over all generated rows.
pub fn consistency(
    generated: &EmbeddingSet,
    real_manifold: &Manifold,
    conditionings: &ConditioningMap,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(ManifoldError::EmptyQuery);
    }
    let scores = consistency_scores(generated, real_manifold, conditionings)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{index_conditionings, BBox, Conditioning, Kind, ObjectInstance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_1d(xs: &[f32], kind: Kind) -> EmbeddingSet {
        let seed = if kind == Kind::Real { 0 } else { 1 };
        let records = (0..xs.len())
            .map(|i| EmbeddingRecord::scene(format!("c{i}"), seed, kind))
            .collect();
        EmbeddingSet::new(1, xs.to_vec(), records).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, cond: &str, kind: Kind) -> EmbeddingSet {
        let seed = if kind == Kind::Real { 0 } else { 1 };
        let vectors = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let records = (0..n).map(|_| EmbeddingRecord::scene(cond, seed, kind)).collect();
        EmbeddingSet::new(dim, vectors, records).unwrap()
    }

    fn brute_radii(targets: &EmbeddingSet, k: usize) -> Vec<f64> {
        (0..targets.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..targets.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let s: f64 = targets
                            .row(i)
                            .iter()
                            .zip(targets.row(j))
                            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                            .sum();
                        s.sqrt()
                    })
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    }

    #[test]
    fn collinear_radii() {
        let set = set_1d(&[0.0, 1.0, 3.0], Kind::Real);
        let m = compute_radii(&set, RadiusPool::Targets, 1).unwrap();
        assert_eq!(m.radii(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn random_radii_match_sorted_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = random_set(&mut rng, 50, 8, "c", Kind::Real);
        let m = compute_radii(&set, RadiusPool::Targets, DEFAULT_K).unwrap();
        assert_eq!(m.radii(), brute_radii(&set, DEFAULT_K).as_slice());
    }

    #[test]
    fn pool_size_preconditions() {
        let set = set_1d(&[0.0, 1.0, 3.0], Kind::Real);
        assert!(matches!(
            compute_radii(&set, RadiusPool::Targets, 3),
            Err(ManifoldError::PoolTooSmall { needed: 4, .. })
        ));
        assert!(compute_radii(&set, RadiusPool::Targets, 2).is_ok());
        let other = set_1d(&[5.0, 6.0, 7.0], Kind::Real);
        assert!(compute_radii(&set, RadiusPool::Disjoint(&other), 3).is_ok());
        assert!(matches!(compute_radii(&set, RadiusPool::Targets, 0), Err(ManifoldError::ZeroK)));
    }

    #[test]
    fn disjoint_pool_counts_every_point() {
        let targets = set_1d(&[0.0], Kind::Real);
        let pool = set_1d(&[0.0, 2.0, 5.0], Kind::Real);
        // the coincident pool row is a different row, so it counts
        let m = compute_radii(&targets, RadiusPool::Disjoint(&pool), 2).unwrap();
        assert_eq!(m.radii(), &[2.0]);
    }

    #[test]
    fn pooled_radii_use_the_whole_pool() {
        let a = set_1d(&[0.0, 10.0], Kind::Real);
        let b = set_1d(&[0.5, 9.0], Kind::Real);
        let m = pooled_radii(&[&a, &b], 0, 1).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.radii(), &[0.5, 1.0]);
        let wrong_rows = [1usize, 0];
        let pool = EmbeddingSet::concat(&[&a, &b]).unwrap();
        assert!(matches!(
            compute_radii(&a, RadiusPool::Containing { pool: &pool, rows: &wrong_rows }, 1),
            Err(ManifoldError::TargetNotInPool(0))
        ));
    }

    #[test]
    fn membership_picks_nearest_covering_point() {
        let set = set_1d(&[0.0, 1.0, 3.0], Kind::Real);
        let m = Manifold::new(&set, vec![1.0, 1.0, 2.0]).unwrap();
        let r = m.membership(&[3.0]).unwrap();
        assert_eq!(r, MembershipResult { inside: true, nearest_covering_ref: Some(2) });
        // 0.5 is covered by both 0 and 1 at equal distance
        assert_eq!(m.membership(&[0.5]).unwrap().nearest_covering_ref, Some(0));
        assert_eq!(m.membership(&[1.9]).unwrap().nearest_covering_ref, Some(1));
        let far = m.membership(&[100.0]).unwrap();
        assert!(!far.inside && far.nearest_covering_ref.is_none());
        assert!(matches!(m.membership(&[0.0, 0.0]), Err(ManifoldError::DimMismatch { .. })));
    }

    #[test]
    fn membership_matches_per_sphere_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let refs = random_set(&mut rng, 20, 3, "c", Kind::Real);
        let m = compute_radii(&refs, RadiusPool::Targets, 3).unwrap();
        for _ in 0..100 {
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let mut expected = None;
            let mut best = f64::INFINITY;
            for i in 0..refs.len() {
                let d = euclidean(&q, refs.row(i));
                if d <= m.radii()[i] && d < best {
                    best = d;
                    expected = Some(i);
                }
            }
            assert_eq!(m.membership(&q).unwrap().nearest_covering_ref, expected);
        }
    }

    #[test]
    fn zero_radius_still_covers_coincident_point() {
        let set = set_1d(&[2.0, 2.0, 2.0], Kind::Real);
        let m = compute_radii(&set, RadiusPool::Targets, 2).unwrap();
        assert_eq!(m.radii(), &[0.0, 0.0, 0.0]);
        assert_eq!(precision(&set, &m).unwrap(), 1.0);
    }

    #[test]
    fn precision_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = random_set(&mut rng, 12, 4, "c", Kind::Real);
        let m = compute_radii(&real, RadiusPool::Targets, 5).unwrap();
        assert_eq!(precision(&real, &m).unwrap(), 1.0);
        let shifted: Vec<f32> = real.vectors().iter().map(|v| v + 100.0).collect();
        let far = EmbeddingSet::new(4, shifted, real.records().to_vec()).unwrap();
        assert_eq!(precision(&far, &m).unwrap(), 0.0);
        assert!(matches!(
            precision(&EmbeddingSet::empty(4).unwrap(), &m),
            Err(ManifoldError::EmptyQuery)
        ));
    }

    #[test]
    fn recall_disjoint_clusters() {
        let real = set_1d(&[0.0, 0.1, 0.2], Kind::Real);
        let gen = set_1d(&[50.0, 50.1, 50.2], Kind::Generated);
        let gm = compute_radii(&gen, RadiusPool::Targets, 1).unwrap();
        assert_eq!(recall(&real, &gm).unwrap(), 0.0);
        let gm = compute_radii(&real, RadiusPool::Targets, 1).unwrap();
        assert_eq!(recall(&real, &gm).unwrap(), 1.0);
    }

    fn cond(id: &str, classes: &[u32]) -> Conditioning {
        let b = BBox { x: 0.0, y: 0.0, w: 0.5, h: 0.5 };
        Conditioning::new(
            id,
            classes.iter().map(|&c| ObjectInstance { class: ClassId(c), bbox: b }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn consistency_partial_overlap() {
        // real point labelled {a, b}, generated conditioning {b, c}
        let conds = index_conditionings(vec![cond("real", &[0, 1]), cond("gen", &[1, 2])]).unwrap();
        let real = EmbeddingSet::new(1, vec![0.0], vec![EmbeddingRecord::scene("real", 0, Kind::Real)]).unwrap();
        let m = Manifold::new(&real, vec![1.0]).unwrap();
        let gen = EmbeddingSet::new(
            1,
            vec![0.5, 9.0],
            vec![
                EmbeddingRecord::scene("gen", 1, Kind::Generated),
                EmbeddingRecord::scene("gen", 1, Kind::Generated),
            ],
        )
        .unwrap();
        let scores = consistency_scores(&gen, &m, &conds).unwrap();
        assert_eq!(scores, vec![1.0 / 3.0, 0.0]);
        assert_eq!(consistency(&gen, &m, &conds).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn consistency_identical_and_outside() {
        let conds = index_conditionings(vec![cond("c", &[0, 1])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = random_set(&mut rng, 10, 2, "c", Kind::Real);
        let m = compute_radii(&real, RadiusPool::Targets, 5).unwrap();
        let gen = EmbeddingSet::new(
            2,
            real.vectors().to_vec(),
            (0..10).map(|_| EmbeddingRecord::scene("c", 2, Kind::Generated)).collect(),
        )
        .unwrap();
        assert_eq!(consistency(&gen, &m, &conds).unwrap(), 1.0);
        let far: Vec<f32> = real.vectors().iter().map(|v| v - 40.0).collect();
        let gen_far = EmbeddingSet::new(2, far, gen.records().to_vec()).unwrap();
        assert_eq!(consistency(&gen_far, &m, &conds).unwrap(), 0.0);
    }

    #[test]
    fn consistency_requires_resolvable_conditionings() {
        let conds = index_conditionings(vec![cond("c", &[0])]).unwrap();
        let real = EmbeddingSet::new(1, vec![0.0], vec![EmbeddingRecord::scene("c", 0, Kind::Real)]).unwrap();
        let m = Manifold::new(&real, vec![1.0]).unwrap();
        let gen = EmbeddingSet::new(1, vec![50.0], vec![EmbeddingRecord::scene("missing", 1, Kind::Generated)]).unwrap();
        assert!(matches!(
            consistency(&gen, &m, &conds),
            Err(ManifoldError::UnresolvedConditioning(id)) if id == "missing"
        ));
    }

    #[test]
    fn object_rows_use_their_own_class() {
        let conds = index_conditionings(vec![cond("c", &[0, 1])]).unwrap();
        let real = EmbeddingSet::new(1, vec![0.0], vec![EmbeddingRecord::object("c", 0, Kind::Real, ClassId(0))]).unwrap();
        let m = Manifold::new(&real, vec![1.0]).unwrap();
        let gen = EmbeddingSet::new(
            1,
            vec![0.1, 0.2],
            vec![
                EmbeddingRecord::object("c", 1, Kind::Generated, ClassId(0)),
                EmbeddingRecord::object("c", 1, Kind::Generated, ClassId(1)),
            ],
        )
        .unwrap();
        assert_eq!(consistency_scores(&gen, &m, &conds).unwrap(), vec![1.0, 0.0]);
    }
}
