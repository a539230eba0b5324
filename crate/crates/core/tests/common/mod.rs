#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scene_eval::splits::{Split, SplitAssignment};
use scene_eval::store::{
    save_conditionings, save_embedding_set, BBox, ClassId, ClassTable, Conditioning, EmbeddingRecord, EmbeddingSet,
    Granularity, Kind, ObjectInstance, SetPaths,
};

pub type ChaChaRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` thing classes named `c0`, `c1`, ..., each its own superclass.
pub fn class_table(n: usize) -> ClassTable {
    ClassTable::new(
        (0..n).map(|i| format!("c{i}")).collect(),
        vec![true; n],
        (0..n).map(|i| format!("s{i}")).collect(),
    )
    .unwrap()
}

pub fn bbox() -> BBox {
    BBox {
        x: 0.1,
        y: 0.1,
        w: 0.5,
        h: 0.5,
    }
}

pub fn cond(id: &str, classes: &[u32]) -> Conditioning {
    let instances = classes
        .iter()
        .map(|&c| ObjectInstance {
            class: ClassId(c),
            bbox: bbox(),
        })
        .collect();
    Conditioning::new(id, instances).unwrap()
}

/// Conditioning with 1..=max_instances instances over `0..n_classes`.
pub fn random_cond(rng: &mut ChaCha8Rng, id: &str, n_classes: u32, max_instances: usize) -> Conditioning {
    let n = rng.random_range(1..=max_instances);
    let classes: Vec<u32> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
    cond(id, &classes)
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

/// Rows on a coarse integer grid, so duplicates and distance ties are common.
pub fn grid_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-3i32..=3) as f32).collect())
        .collect()
}

pub fn scene_set(rows: &[Vec<f32>], kind: Kind, ids: &[&str], seed: u32) -> EmbeddingSet {
    let dim = rows.first().map_or(1, |r| r.len());
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, _)| EmbeddingRecord::scene(ids[i % ids.len()], seed, kind))
        .collect();
    EmbeddingSet::from_rows(dim, rows, records).unwrap()
}

/// Scene set with one distinct conditioning id per row.
pub fn plain_set(rows: &[Vec<f32>]) -> EmbeddingSet {
    let dim = rows.first().map_or(1, |r| r.len());
    let records = (0..rows.len())
        .map(|i| EmbeddingRecord::scene(format!("x{i}"), 0, Kind::Real))
        .collect();
    EmbeddingSet::from_rows(dim, rows, records).unwrap()
}

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// Row-major f64 covariance with the unbiased normalizer, computed two-pass.
pub fn covariance(rows: &[Vec<f32>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] as f64 - mean[a]) * (r[b] as f64 - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    (mean, cov)
}

/// Everything a panel run needs, written to a directory.
pub struct PanelFixture {
    pub classes: ClassTable,
    pub train: Vec<Conditioning>,
    pub eval: Vec<Conditioning>,
    pub assignment: BTreeMap<String, Split>,
    pub real_scene: EmbeddingSet,
    pub generated_scene: EmbeddingSet,
    pub real_object: Option<EmbeddingSet>,
    pub generated_object: Option<EmbeddingSet>,
    /// Raw JSONL lines.
    pub scene_predictions: Option<String>,
    pub object_predictions: Option<String>,
    pub ds_table: Option<String>,
    pub k: usize,
}

impl PanelFixture {
    /// Write all files into `dir` and return the config path.
    pub fn write(&self, dir: &Path) -> PathBuf {
        self.classes.save(dir.join("classes.json")).unwrap();
        save_conditionings(dir.join("train.cond.jsonl"), &self.train, &self.classes).unwrap();
        save_conditionings(dir.join("eval.cond.jsonl"), &self.eval, &self.classes).unwrap();
        let assignment: SplitAssignment =
            serde_json::from_value(serde_json::to_value(&self.assignment).unwrap()).unwrap();
        assignment.save(dir.join("splits.json")).unwrap();
        let save = |set: &EmbeddingSet, name: &str| {
            let p = SetPaths::from_prefix(dir.join(name));
            save_embedding_set(set, &p.matrix, &p.metadata, &self.classes).unwrap();
        };
        save(&self.real_scene, "real_scene");
        save(&self.generated_scene, "gen_scene");
        let mut cfg = serde_json::json!({
            "classes": "classes.json",
            "conditionings": ["train.cond.jsonl", "eval.cond.jsonl"],
            "splits": "splits.json",
            "embedding_source": "fixture",
            "k": self.k,
            "real_scene": "real_scene",
            "generated_scene": "gen_scene",
        });
        if let (Some(r), Some(g)) = (&self.real_object, &self.generated_object) {
            save(r, "real_object");
            save(g, "gen_object");
            cfg["real_object"] = "real_object".into();
            cfg["generated_object"] = "gen_object".into();
        }
        for (text, file, key) in [
            (&self.scene_predictions, "scene_pred.jsonl", "scene_predictions"),
            (&self.object_predictions, "object_pred.jsonl", "object_predictions"),
            (&self.ds_table, "lpips.jsonl", "ds_table"),
        ] {
            if let Some(text) = text {
                std::fs::write(dir.join(file), text).unwrap();
                cfg[key] = file.into();
            }
        }
        let path = dir.join("panel.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

/// A seeded panel fixture with roughly `rows` embedding rows in total.
pub fn random_panel_fixture(seed: u64, rows: usize) -> PanelFixture {
    let mut rng = rng(seed);
    let n_classes = 6u32;
    let classes = class_table(n_classes as usize);
    let dim = 6;
    let n_conds = (rows / 6).max(20);
    let n_train = n_conds * 3 / 5;
    // train layouts use classes 0..4 only, so eval layouts touching 4 or 5
    // are guaranteed to be unseen at the coarse level
    let train: Vec<Conditioning> = (0..n_train)
        .map(|i| random_cond(&mut rng, &format!("t{i:04}"), 4, 3))
        .collect();
    let mut eval = Vec::new();
    for i in 0..n_conds - n_train {
        let id = format!("e{i:04}");
        let c = if i % 2 == 0 {
            let src = &train[rng.random_range(0..train.len())];
            let mut cls: Vec<u32> = src.instances().iter().map(|x| x.class.0).collect();
            cls.shuffle(&mut rng);
            cond(&id, &cls)
        } else {
            let mut cls: Vec<u32> = vec![4 + rng.random_range(0..2)];
            cls.extend((0..rng.random_range(0..3)).map(|_| rng.random_range(0..n_classes)));
            cond(&id, &cls)
        };
        eval.push(c);
    }
    let assignment = scene_eval::splits::partition(&train, &eval, (n_conds - n_train) / 6, seed)
        .unwrap();
    let assignment: BTreeMap<String, Split> =
        serde_json::from_value(serde_json::to_value(&assignment).unwrap()).unwrap();

    let all: Vec<&Conditioning> = train.iter().chain(&eval).collect();
    let seeds = [11u32, 22];
    let vec_for = |rng: &mut ChaCha8Rng, shift: f32| -> Vec<f32> {
        (0..dim).map(|_| rng.random_range(-1.0f32..1.0) + shift).collect()
    };
    let mut rs = (Vec::new(), Vec::new());
    let mut gs = (Vec::new(), Vec::new());
    let mut ro = (Vec::new(), Vec::new());
    let mut go = (Vec::new(), Vec::new());
    let mut scene_pred = String::new();
    let mut object_pred = String::new();
    for c in &all {
        rs.0.push(vec_for(&mut rng, 0.0));
        rs.1.push(EmbeddingRecord::scene(c.id(), 0, Kind::Real));
        for inst in c.instances() {
            ro.0.push(vec_for(&mut rng, inst.class.0 as f32));
            ro.1.push(EmbeddingRecord::object(c.id(), 0, Kind::Real, inst.class));
        }
        for &s in &seeds {
            gs.0.push(vec_for(&mut rng, 0.1));
            gs.1.push(EmbeddingRecord::scene(c.id(), s, Kind::Generated));
            let labels: Vec<String> = c
                .coarse()
                .iter()
                .filter(|_| rng.random_bool(0.8))
                .map(|k| format!("\"c{}\"", k.0))
                .collect();
            scene_pred += &format!(
                "{{\"conditioning_id\":\"{}\",\"seed\":{s},\"labels\":[{}]}}\n",
                c.id(),
                labels.join(",")
            );
            for (i, inst) in c.instances().iter().enumerate() {
                go.0.push(vec_for(&mut rng, inst.class.0 as f32 + 0.2));
                go.1.push(EmbeddingRecord::object(c.id(), s, Kind::Generated, inst.class));
                let label = if rng.random_bool(0.7) { inst.class.0 } else { rng.random_range(0..n_classes) };
                object_pred += &format!(
                    "{{\"conditioning_id\":\"{}\",\"seed\":{s},\"instance\":{i},\"label\":\"c{label}\"}}\n",
                    c.id()
                );
            }
        }
    }
    let make = |(v, r): (Vec<Vec<f32>>, Vec<EmbeddingRecord>)| EmbeddingSet::from_rows(dim, &v, r).unwrap();
    PanelFixture {
        classes,
        train,
        eval,
        assignment,
        real_scene: make(rs),
        generated_scene: make(gs),
        real_object: Some(make(ro)),
        generated_object: Some(make(go)),
        scene_predictions: Some(scene_pred),
        object_predictions: Some(object_pred),
        ds_table: None,
        k: 5,
    }
}

pub fn granularity_of(set: &EmbeddingSet) -> Granularity {
    set.record(0).granularity
}
