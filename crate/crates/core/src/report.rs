//! Per-seed aggregation and the full evaluation panel.
//!
//! [`run_panel`] loads everything named in a [`PanelConfig`], evaluates each
//! split at scene and object granularity once per generation seed, and
//! writes one JSON report per (split, granularity), a combined `panel.json`
//! and a flat `metrics.csv` for plotting. Output bytes depend only on the
//! inputs, never on thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diversity::{self, DiversityError, DiversityScore, DsMode, PairwiseDistanceTable};
use crate::frechet::{self, FidReport, FrechetError, GaussianStats};
use crate::labelmetrics::{self, LabelError, PredictionRecord};
use crate::manifold::{self, compute_radii, Manifold, ManifoldError, RadiusPool, DEFAULT_K};
use crate::splits::{Split, SplitAssignment, SplitError};
use crate::store::{
    index_conditionings, load_conditionings, ClassTable, ConditioningMap, EmbeddingSet, Granularity, Kind, SetPaths,
    StoreError,
};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("metric lists have different lengths ({0} vs {1})")]
    Ragged(usize, usize),
    #[error("metric {0:?} has no values")]
    NoValues(String),
    #[error("config: {0}")]
    Config(String),
    #[error("conditioning {0:?} has no split assignment")]
    Unassigned(String),
    #[error("{set} contains {found:?} rows")]
    WrongKind { set: &'static str, found: Kind },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report {path}: {reason}")]
    BadReport { path: PathBuf, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Frechet(#[from] FrechetError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

impl ReportError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ReportError::Frechet(e) if e.is_numerical())
    }
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            per_seed: values,
        })
    }
}

/// Mean and population std of every metric; all lists must share one
/// non-zero length.
pub fn aggregate(per_seed: BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, MetricSummary>> {
    let mut len = None;
    let mut out = BTreeMap::new();
    for (name, values) in per_seed {
        match len {
            None => len = Some(values.len()),
            Some(l) if l != values.len() => return Err(ReportError::Ragged(l, values.len())),
            _ => {}
        }
        let summary = MetricSummary::from_values(values).ok_or_else(|| ReportError::NoValues(name.clone()))?;
        out.insert(name, summary);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub k: usize,
    pub embedding_source: String,
    pub n_real: usize,
    /// Generated rows over all seeds.
    pub n_generated: usize,
    pub ds_mode: Option<DsMode>,
    pub toolkit_version: String,
    /// SHA-256 of every input file, keyed by its role in the config.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    #[serde(flatten)]
    pub score: DiversityScore,
    pub mode: DsMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub granularity: Granularity,
    pub seeds: Vec<u32>,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// One entry per seed, carrying both sample counts.
    pub fid_details: Vec<FidReport>,
    pub diversity: Option<DiversitySummary>,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn file_name(&self) -> String {
        format!("report_{}_{}.json", self.split, self.granularity)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ReportError::BadReport {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Input files of a panel run. Relative paths resolve against the config
/// file's directory. Embedding sets are given as path prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelConfig {
    pub classes: PathBuf,
    /// Every conditioning file the splits refer to (train and eval).
    pub conditionings: Vec<PathBuf>,
    pub splits: PathBuf,
    pub embedding_source: String,
    #[serde(default = "default_k")]
    pub k: usize,
    pub real_scene: PathBuf,
    pub generated_scene: PathBuf,
    #[serde(default)]
    pub real_object: Option<PathBuf>,
    #[serde(default)]
    pub generated_object: Option<PathBuf>,
    #[serde(default)]
    pub scene_predictions: Option<PathBuf>,
    #[serde(default)]
    pub object_predictions: Option<PathBuf>,
    #[serde(default)]
    pub ds_table: Option<PathBuf>,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl PanelConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: PanelConfig = serde_json::from_str(&text).map_err(|e| ReportError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.classes);
        self.conditionings.iter_mut().for_each(fix);
        fix(&mut self.splits);
        fix(&mut self.real_scene);
        fix(&mut self.generated_scene);
        for p in [
            &mut self.real_object,
            &mut self.generated_object,
            &mut self.scene_predictions,
            &mut self.object_predictions,
            &mut self.ds_table,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn object_sets(&self) -> Result<Option<(&Path, &Path)>> {
        match (&self.real_object, &self.generated_object) {
            (Some(r), Some(g)) => Ok(Some((r, g))),
            (None, None) => Ok(None),
            _ => Err(ReportError::Config(
                "real_object and generated_object must be given together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelCell {
    pub mean: f64,
    pub std: f64,
}

impl From<&MetricSummary> for PanelCell {
    fn from(m: &MetricSummary) -> Self {
        Self { mean: m.mean, std: m.std }
    }
}

/// Headline columns in panel order.
pub const PANEL_COLUMNS: [&str; 11] = ["SP", "SR", "SC", "OP", "OR", "OC", "F1", "Acc", "DS", "SFID", "OFID"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub k: usize,
    pub embedding_source: String,
    pub toolkit_version: String,
    /// Split name to column name to value; absent metrics are null.
    pub splits: BTreeMap<String, BTreeMap<String, Option<PanelCell>>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelOutput {
    pub reports: Vec<MetricReport>,
    pub panel: Panel,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loaded inputs shared by every panel cell.
struct PanelInputs {
    conditionings: ConditioningMap,
    assignment: SplitAssignment,
    scene: (EmbeddingSet, EmbeddingSet),
    object: Option<(EmbeddingSet, EmbeddingSet)>,
    scene_predictions: Option<Vec<PredictionRecord>>,
    object_predictions: Option<Vec<PredictionRecord>>,
    ds_table: Option<PairwiseDistanceTable>,
    digests: BTreeMap<String, String>,
}

fn load_set(prefix: &Path, classes: &ClassTable, role: &str, digests: &mut BTreeMap<String, String>) -> Result<EmbeddingSet> {
    let paths = SetPaths::from_prefix(prefix);
    digests.insert(format!("{role}.matrix"), sha256_file(&paths.matrix)?);
    digests.insert(format!("{role}.metadata"), sha256_file(&paths.metadata)?);
    Ok(paths.load(classes)?)
}

fn require_kind(set: &EmbeddingSet, kind: Kind, name: &'static str) -> Result<()> {
    match set.records().iter().find(|r| r.kind != kind) {
        Some(r) => Err(ReportError::WrongKind { set: name, found: r.kind }),
        None => Ok(()),
    }
}

fn load_inputs(cfg: &PanelConfig) -> Result<PanelInputs> {
    let mut digests = BTreeMap::new();
    digests.insert("classes".to_string(), sha256_file(&cfg.classes)?);
    let classes = ClassTable::load(&cfg.classes)?;
    if cfg.conditionings.is_empty() {
        return Err(ReportError::Config("no conditioning files".into()));
    }
    let mut conds = Vec::new();
    for (i, p) in cfg.conditionings.iter().enumerate() {
        digests.insert(format!("conditionings.{i}"), sha256_file(p)?);
        conds.extend(load_conditionings(p, &classes)?);
    }
    let conditionings = index_conditionings(conds)?;
    digests.insert("splits".to_string(), sha256_file(&cfg.splits)?);
    let assignment = SplitAssignment::load(&cfg.splits)?;

    let scene = (
        load_set(&cfg.real_scene, &classes, "real_scene", &mut digests)?,
        load_set(&cfg.generated_scene, &classes, "generated_scene", &mut digests)?,
    );
    let object = match cfg.object_sets()? {
        Some((r, g)) => Some((
            load_set(r, &classes, "real_object", &mut digests)?,
            load_set(g, &classes, "generated_object", &mut digests)?,
        )),
        None => None,
    };
    for (sets, gran) in [(Some(&scene), Granularity::Scene), (object.as_ref(), Granularity::Object)] {
        let Some((real, generated)) = sets else { continue };
        require_kind(real, Kind::Real, "real set")?;
        require_kind(generated, Kind::Generated, "generated set")?;
        for r in real.records().iter().chain(generated.records()) {
            if r.granularity != gran {
                return Err(ReportError::Config(format!("{gran} set contains {} rows", r.granularity)));
            }
            if assignment.get(&r.conditioning_id).is_none() {
                return Err(ReportError::Unassigned(r.conditioning_id.clone()));
            }
        }
    }

    let mut load_preds = |p: &Option<PathBuf>, role: &str| -> Result<Option<Vec<PredictionRecord>>> {
        let Some(p) = p else { return Ok(None) };
        digests.insert(role.to_string(), sha256_file(p)?);
        Ok(Some(labelmetrics::load_predictions(p, &classes)?))
    };
    let scene_predictions = load_preds(&cfg.scene_predictions, "scene_predictions")?;
    let object_predictions = load_preds(&cfg.object_predictions, "object_predictions")?;
    let ds_table = match &cfg.ds_table {
        Some(p) => {
            digests.insert("ds_table".to_string(), sha256_file(p)?);
            Some(PairwiseDistanceTable::load(p)?)
        }
        None => None,
    };
    for p in scene_predictions.iter().chain(&object_predictions).flatten() {
        if assignment.get(&p.conditioning_id).is_none() {
            return Err(ReportError::Unassigned(p.conditioning_id.clone()));
        }
    }

    Ok(PanelInputs {
        conditionings,
        assignment,
        scene,
        object,
        scene_predictions,
        object_predictions,
        ds_table,
        digests,
    })
}

fn rows_in(set: &EmbeddingSet, assignment: &SplitAssignment, split: Split) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| assignment.get(&set.record(i).conditioning_id) == Some(split))
        .collect()
}

/// Manifold over `rows` of `pool`, with radii against the whole pool.
fn split_manifold(pool: &EmbeddingSet, rows: &[usize], k: usize) -> Result<(EmbeddingSet, Manifold)> {
    let targets = pool.select(rows);
    let manifold = compute_radii(&targets, RadiusPool::Containing { pool, rows }, k)?;
    Ok((targets, manifold))
}

struct CellContext<'a> {
    cfg: &'a PanelConfig,
    inputs: &'a PanelInputs,
    granularity: Granularity,
    real: &'a EmbeddingSet,
    generated: &'a EmbeddingSet,
    seeds: &'a [u32],
}

fn evaluate_cell(ctx: &CellContext<'_>, split: Split) -> Result<MetricReport> {
    let CellContext {
        cfg,
        inputs,
        granularity,
        real,
        generated,
        seeds,
    } = *ctx;
    let k = cfg.k;
    let assignment = &inputs.assignment;
    let mut warnings = Vec::new();

    let real_rows = rows_in(real, assignment, split);
    let (real_split, real_manifold) = split_manifold(real, &real_rows, k)?;
    let real_stats = frechet::fit_gaussian(&real_split)?;
    let real_rank = frechet::cov_rank(&real_stats.cov)?;

    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |name: &str, v: f64| values.entry(name.to_string()).or_default().push(v);
    let mut fid_details = Vec::new();
    let mut n_generated = 0;
    for &seed in seeds {
        let pool = generated.filter(|r| r.seed == seed);
        let rows = rows_in(&pool, assignment, split);
        let (gen_split, gen_manifold) = split_manifold(&pool, &rows, k)?;
        n_generated += gen_split.len();

        push("precision", manifold::precision(&gen_split, &real_manifold)?);
        push("recall", manifold::recall(&real_split, &gen_manifold)?);
        push(
            "consistency",
            manifold::consistency(&gen_split, &real_manifold, &inputs.conditionings)?,
        );
        let fid = fid_against(&real_stats, real_rank, &gen_split)?;
        if fid.n_x != fid.n_y {
            warnings.push(format!(
                "seed {seed}: fid sample counts differ (real {}, generated {})",
                fid.n_x, fid.n_y
            ));
        }
        push("fid", fid.fid);
        fid_details.push(fid);

        let in_cell = |p: &&PredictionRecord| p.seed == seed && assignment.get(&p.conditioning_id) == Some(split);
        match granularity {
            Granularity::Scene => {
                if let Some(preds) = &inputs.scene_predictions {
                    let sel: Vec<_> = preds.iter().filter(in_cell).cloned().collect();
                    push("f1", labelmetrics::mean_f1(&sel, &inputs.conditionings)?);
                }
            }
            Granularity::Object => {
                if let Some(preds) = &inputs.object_predictions {
                    let sel: Vec<_> = preds.iter().filter(in_cell).cloned().collect();
                    let acc = labelmetrics::object_accuracy(&sel, &inputs.conditionings)?;
                    push("acc_instance", acc.acc_instance);
                    push("acc_class_balanced", acc.acc_class_balanced);
                }
            }
        }
    }

    let (diversity, ds_mode) = match granularity {
        Granularity::Scene => {
            let d = split_diversity(inputs, generated, split, &mut warnings)?;
            let mode = d.as_ref().map(|d| d.mode);
            (d, mode)
        }
        Granularity::Object => (None, None),
    };

    Ok(MetricReport {
        split: split.name().to_string(),
        granularity,
        seeds: seeds.to_vec(),
        metrics: aggregate(values)?,
        fid_details,
        diversity,
        provenance: Provenance {
            k,
            embedding_source: cfg.embedding_source.clone(),
            n_real: real_split.len(),
            n_generated,
            ds_mode,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            inputs: inputs.digests.clone(),
        },
        warnings,
    })
}

fn fid_against(real: &GaussianStats, real_rank: usize, generated: &EmbeddingSet) -> Result<FidReport> {
    let stats = frechet::fit_gaussian(generated)?;
    if stats.dim() != real.dim() {
        return Err(FrechetError::DimMismatch(real.dim(), stats.dim()).into());
    }
    Ok(FidReport {
        fid: frechet::fid_from_stats(real, &stats)?,
        n_x: real.n,
        n_y: stats.n,
        dim: real.dim(),
        cov_rank_x: real_rank,
        cov_rank_y: frechet::cov_rank(&stats.cov)?,
    })
}

fn split_diversity(
    inputs: &PanelInputs,
    generated: &EmbeddingSet,
    split: Split,
    warnings: &mut Vec<String>,
) -> Result<Option<DiversitySummary>> {
    let assignment = &inputs.assignment;
    if let Some(table) = &inputs.ds_table {
        let mut table = table.clone();
        table.retain(|c| assignment.get(c) == Some(split));
        if table.is_empty() {
            warnings.push("diversity table has no entries for this split".into());
            return Ok(None);
        }
        return Ok(Some(DiversitySummary {
            score: diversity::ds_from_table(&table)?,
            mode: DsMode::Table,
        }));
    }
    let rows = generated.filter(|r| assignment.get(&r.conditioning_id) == Some(split));
    match diversity::ds_from_embeddings(&rows) {
        Ok(score) => Ok(Some(DiversitySummary {
            score,
            mode: DsMode::Embedding,
        })),
        Err(DiversityError::TooFewSeeds(c)) => {
            warnings.push(format!("diversity skipped: conditioning {c:?} has fewer than 2 seeds"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn seeds_of(set: &EmbeddingSet) -> Vec<u32> {
    set.records().iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect()
}

fn splits_with_rows(set: &EmbeddingSet, assignment: &SplitAssignment) -> BTreeSet<Split> {
    set.records()
        .iter()
        .filter_map(|r| assignment.get(&r.conditioning_id))
        .collect()
}

/// Evaluate the panel in memory. Reports come out in split order, scene
/// before object.
pub fn evaluate_panel(cfg: &PanelConfig) -> Result<PanelOutput> {
    if cfg.k == 0 {
        return Err(ReportError::Config("k must be positive".into()));
    }
    let inputs = load_inputs(cfg)?;
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    let granularities = [
        (Granularity::Scene, Some(&inputs.scene)),
        (Granularity::Object, inputs.object.as_ref()),
    ];
    for split in Split::ALL {
        for (granularity, sets) in granularities {
            let Some((real, generated)) = sets else { continue };
            let has_real = splits_with_rows(real, &inputs.assignment).contains(&split);
            let has_gen = splits_with_rows(generated, &inputs.assignment).contains(&split);
            match (has_real, has_gen) {
                (true, true) => {}
                (false, false) => continue,
                _ => {
                    warnings.push(format!(
                        "{} {granularity}: skipped, rows present on only one side",
                        split.name()
                    ));
                    continue;
                }
            }
            let seeds = seeds_of(generated);
            let ctx = CellContext {
                cfg,
                inputs: &inputs,
                granularity,
                real,
                generated,
                seeds: &seeds,
            };
            reports.push(evaluate_cell(&ctx, split)?);
        }
    }
    if reports.is_empty() {
        return Err(ReportError::Config("no split has both real and generated rows".into()));
    }
    let panel = assemble_panel(cfg, &reports, warnings);
    Ok(PanelOutput { reports, panel })
}

fn assemble_panel(cfg: &PanelConfig, reports: &[MetricReport], warnings: Vec<String>) -> Panel {
    let mut splits: BTreeMap<String, BTreeMap<String, Option<PanelCell>>> = BTreeMap::new();
    for r in reports {
        let row = splits
            .entry(r.split.clone())
            .or_insert_with(|| PANEL_COLUMNS.iter().map(|c| (c.to_string(), None)).collect());
        let cell = |name: &str| r.metrics.get(name).map(PanelCell::from);
        let (prefix, label_metric, label_col) = match r.granularity {
            Granularity::Scene => ("S", "f1", "F1"),
            Granularity::Object => ("O", "acc_instance", "Acc"),
        };
        row.insert(format!("{prefix}P"), cell("precision"));
        row.insert(format!("{prefix}R"), cell("recall"));
        row.insert(format!("{prefix}C"), cell("consistency"));
        row.insert(format!("{prefix}FID"), cell("fid"));
        row.insert(label_col.to_string(), cell(label_metric));
        if r.granularity == Granularity::Scene {
            let ds = r.diversity.as_ref().map(|d| PanelCell {
                mean: d.score.mean,
                std: d.score.std,
            });
            row.insert("DS".to_string(), ds);
        }
    }
    Panel {
        k: cfg.k,
        embedding_source: cfg.embedding_source.clone(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        splits,
        warnings,
    }
}

/// Flat CSV, one row per (split, granularity, metric, seed). Diversity is
/// not per seed and uses the seed column value `all`.
pub fn plot_data(reports: &[MetricReport]) -> String {
    let mut out = String::from("split,granularity,metric,seed,value\n");
    for r in reports {
        for (name, m) in &r.metrics {
            for (seed, v) in r.seeds.iter().zip(&m.per_seed) {
                let _ = writeln!(out, "{},{},{},{},{}", r.split, r.granularity, name, seed, v);
            }
        }
        if let Some(d) = &r.diversity {
            let _ = writeln!(out, "{},{},ds,all,{}", r.split, r.granularity, d.score.mean);
        }
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Evaluate and write `report_{split}_{granularity}.json`, `panel.json` and
/// `metrics.csv` into `out_dir`.
pub fn run_panel(cfg: &PanelConfig, out_dir: &Path) -> Result<PanelOutput> {
    let output = evaluate_panel(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for r in &output.reports {
        write_file(&out_dir.join(r.file_name()), &to_json(r))?;
    }
    write_file(&out_dir.join("panel.json"), &to_json(&output.panel))?;
    write_file(&out_dir.join("metrics.csv"), &plot_data(&output.reports))?;
    Ok(output)
}
