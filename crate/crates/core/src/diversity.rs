//! Intra-conditioning diversity score (DS): the mean pairwise distance among
//! samples generated from the same conditioning with different seeds.
//!
//! Distances come either from a precomputed perceptual table or, as a
//! fallback, from Euclidean distance in the embedding space. Reports carry
//! the mode that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::euclidean;
use crate::store::{read_jsonl, write_jsonl, EmbeddingSet, StoreError};

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("conditioning {0:?} has fewer than 2 seeds")]
    TooFewSeeds(String),
    #[error("negative or non-finite distance {distance} for {conditioning_id:?} ({seed_i}, {seed_j})")]
    InvalidDistance {
        conditioning_id: String,
        seed_i: u32,
        seed_j: u32,
        distance: f64,
    },
    #[error("pair ({seed_i}, {seed_j}) of {conditioning_id:?} must satisfy seed_i < seed_j")]
    BadPair {
        conditioning_id: String,
        seed_i: u32,
        seed_j: u32,
    },
    #[error("duplicate entry for {conditioning_id:?} ({seed_i}, {seed_j})")]
    Duplicate {
        conditioning_id: String,
        seed_i: u32,
        seed_j: u32,
    },
    #[error("no conditionings to score")]
    Empty,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = DiversityError> = std::result::Result<T, E>;

/// Which distance produced a DS value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsMode {
    /// Precomputed perceptual (LPIPS) distances.
    Table,
    /// Euclidean distance between embeddings.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub mean: f64,
    /// Population standard deviation across conditionings.
    pub std: f64,
    pub n_conditionings: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableLine {
    conditioning_id: String,
    seed_i: u32,
    seed_j: u32,
    distance: f64,
}

/// Distances keyed by `(conditioning_id, seed_i, seed_j)` with `seed_i < seed_j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairwiseDistanceTable {
    entries: BTreeMap<(String, u32, u32), f64>,
}

impl PairwiseDistanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, conditioning_id: &str, seed_i: u32, seed_j: u32, distance: f64) -> Result<()> {
        if seed_i >= seed_j {
            return Err(DiversityError::BadPair {
                conditioning_id: conditioning_id.to_string(),
                seed_i,
                seed_j,
            });
        }
        if !distance.is_finite() || distance < 0.0 {
            return Err(DiversityError::InvalidDistance {
                conditioning_id: conditioning_id.to_string(),
                seed_i,
                seed_j,
                distance,
            });
        }
        let key = (conditioning_id.to_string(), seed_i, seed_j);
        if self.entries.insert(key, distance).is_some() {
            return Err(DiversityError::Duplicate {
                conditioning_id: conditioning_id.to_string(),
                seed_i,
                seed_j,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, u32, f64)> {
        self.entries.iter().map(|((c, i, j), d)| (c.as_str(), *i, *j, *d))
    }

    /// Keep only conditionings accepted by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|(c, _, _), _| keep(c));
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let lines: Vec<TableLine> = read_jsonl(path.as_ref(), |_, line| Ok(line))?;
        let mut table = Self::new();
        for l in lines {
            table.insert(&l.conditioning_id, l.seed_i, l.seed_j, l.distance)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines = self.iter().map(|(c, i, j, d)| TableLine {
            conditioning_id: c.to_string(),
            seed_i: i,
            seed_j: j,
            distance: d,
        });
        Ok(write_jsonl(path.as_ref(), lines)?)
    }
}

/// Per-conditioning mean distance, then mean and population std across
/// conditionings in sorted id order.
pub fn ds_from_table(table: &PairwiseDistanceTable) -> Result<DiversityScore> {
    let mut per_cond: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (cond, _, _, d) in table.iter() {
        let e = per_cond.entry(cond).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    if per_cond.is_empty() {
        return Err(DiversityError::Empty);
    }
    let means: Vec<f64> = per_cond.values().map(|(s, n)| s / *n as f64).collect();
    let m = means.len() as f64;
    let mean = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    Ok(DiversityScore {
        mean,
        std: var.sqrt(),
        n_conditionings: means.len(),
    })
}

/// Pairwise Euclidean table over same-conditioning rows of a generated set.
pub fn embedding_distance_table(generated: &EmbeddingSet) -> Result<PairwiseDistanceTable> {
    let mut groups: BTreeMap<&str, Vec<(u32, usize)>> = BTreeMap::new();
    for (i, r) in generated.records().iter().enumerate() {
        groups.entry(r.conditioning_id.as_str()).or_default().push((r.seed, i));
    }
    let mut table = PairwiseDistanceTable::new();
    for (cond, mut rows) in groups {
        rows.sort();
        if rows.len() < 2 {
            return Err(DiversityError::TooFewSeeds(cond.to_string()));
        }
        for (a, &(seed_i, row_i)) in rows.iter().enumerate() {
            for &(seed_j, row_j) in &rows[a + 1..] {
                let d = euclidean(generated.row(row_i), generated.row(row_j));
                table.insert(cond, seed_i, seed_j, d)?;
            }
        }
    }
    Ok(table)
}

pub fn ds_from_embeddings(generated: &EmbeddingSet) -> Result<DiversityScore> {
    ds_from_table(&embedding_distance_table(generated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{EmbeddingRecord, Kind};

    #[test]
    fn single_conditioning() {
        let mut t = PairwiseDistanceTable::new();
        t.insert("a", 0, 1, 0.2).unwrap();
        t.insert("a", 0, 2, 0.4).unwrap();
        let s = ds_from_table(&t).unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn two_conditionings() {
        let mut t = PairwiseDistanceTable::new();
        t.insert("a", 0, 1, 0.1).unwrap();
        t.insert("b", 0, 1, 0.3).unwrap();
        let s = ds_from_table(&t).unwrap();
        assert!((s.mean - 0.2).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
        assert_eq!(s.n_conditionings, 2);
    }

    #[test]
    fn table_rejects_bad_entries() {
        let mut t = PairwiseDistanceTable::new();
        assert!(matches!(t.insert("a", 1, 1, 0.1), Err(DiversityError::BadPair { .. })));
        assert!(matches!(t.insert("a", 2, 1, 0.1), Err(DiversityError::BadPair { .. })));
        assert!(matches!(t.insert("a", 0, 1, -0.1), Err(DiversityError::InvalidDistance { .. })));
        t.insert("a", 0, 1, 0.1).unwrap();
        assert!(matches!(t.insert("a", 0, 1, 0.1), Err(DiversityError::Duplicate { .. })));
        assert!(matches!(ds_from_table(&PairwiseDistanceTable::new()), Err(DiversityError::Empty)));
    }

    #[test]
    fn five_seeds_give_ten_pairs() {
        let records = (0..5).map(|s| EmbeddingRecord::scene("c", s + 1, Kind::Generated)).collect();
        let set = EmbeddingSet::new(1, (0..5).map(|v| v as f32).collect(), records).unwrap();
        assert_eq!(embedding_distance_table(&set).unwrap().len(), 10);
        // mean of |i - j| over pairs of 0..5 = 20 / 10
        assert_eq!(ds_from_embeddings(&set).unwrap().mean, 2.0);
    }

    #[test]
    fn embedding_mode_basics() {
        let recs = |n: u32| (0..n).map(|s| EmbeddingRecord::scene("c", s + 1, Kind::Generated)).collect();
        let same = EmbeddingSet::new(2, vec![1.5; 6], recs(3)).unwrap();
        assert_eq!(ds_from_embeddings(&same).unwrap().mean, 0.0);
        let two = EmbeddingSet::new(1, vec![0.0, 2.0], recs(2)).unwrap();
        assert_eq!(ds_from_embeddings(&two).unwrap().mean, 2.0);
        let one = EmbeddingSet::new(1, vec![0.0], recs(1)).unwrap();
        assert!(matches!(ds_from_embeddings(&one), Err(DiversityError::TooFewSeeds(_))));
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lpips.jsonl");
        let mut t = PairwiseDistanceTable::new();
        t.insert("x", 1, 4, 0.25).unwrap();
        t.insert("a", 0, 2, 0.5).unwrap();
        t.save(&path).unwrap();
        assert_eq!(PairwiseDistanceTable::load(&path).unwrap(), t);
        std::fs::write(&path, "{\"conditioning_id\":\"a\",\"seed_i\":3,\"seed_j\":1,\"distance\":0.1}\n").unwrap();
        assert!(matches!(PairwiseDistanceTable::load(&path), Err(DiversityError::BadPair { .. })));
    }
}
