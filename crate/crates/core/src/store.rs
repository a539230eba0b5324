//! Data model shared by every metric: class tables, scene conditionings and
//! embedding sets, together with their on-disk formats.
//!
//! File formats:
//!
//! * `classes.json`: `{"names": [...], "is_thing": [...], "superclass": [...]}`
//! * `*.cond.jsonl`: one `{"id", "instances": [{"class", "box": [x, y, w, h]}]}` per line
//! * `*.cseb`: little-endian binary matrix, 20-byte header
//!   (`b"CSEB"`, version `u32 = 1`, rows `u64`, dim `u32`) followed by
//!   `rows * dim` row-major `f32` values
//! * `*.meta.jsonl`: one record per matrix row, in row order

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MATRIX_MAGIC: [u8; 4] = *b"CSEB";
pub const MATRIX_VERSION: u32 = 1;
pub const MATRIX_HEADER_LEN: usize = 20;

/// Slack allowed on the `x + w <= 1` / `y + h <= 1` box checks.
const BOX_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed matrix header: {0}")]
    MalformedHeader(String),
    #[error("matrix declares {matrix} rows but metadata has {metadata} records")]
    RowCountMismatch { matrix: usize, metadata: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unknown class name {0:?}")]
    UnknownClass(String),
    #[error("class id {id} out of range for a table of {len} classes")]
    ClassOutOfRange { id: u32, len: usize },
    #[error("invalid class table: {0}")]
    InvalidClassTable(String),
    #[error("invalid record at row {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },
    #[error("invalid conditioning {id:?}: {reason}")]
    InvalidConditioning { id: String, reason: String },
    #[error("duplicate conditioning id {0:?}")]
    DuplicateConditioning(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn json(path: &Path, line: usize, source: serde_json::Error) -> Self {
        StoreError::Json {
            path: path.to_path_buf(),
            line,
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Index into a [`ClassTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassTableFile {
    names: Vec<String>,
    is_thing: Vec<bool>,
    superclass: Vec<String>,
}

/// Ordered table of class names with their things/stuff flag and superclass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    names: Vec<String>,
    is_thing: Vec<bool>,
    superclass: Vec<String>,
    index: HashMap<String, ClassId>,
}

impl ClassTable {
    pub fn new(names: Vec<String>, is_thing: Vec<bool>, superclass: Vec<String>) -> Result<Self> {
        if names.len() != is_thing.len() || names.len() != superclass.len() {
            return Err(StoreError::InvalidClassTable(format!(
                "names ({}), is_thing ({}) and superclass ({}) lengths differ",
                names.len(),
                is_thing.len(),
                superclass.len()
            )));
        }
        if names.len() > u32::MAX as usize {
            return Err(StoreError::InvalidClassTable("too many classes".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(StoreError::InvalidClassTable(format!("class {i} has an empty name")));
            }
            if index.insert(name.clone(), ClassId(i as u32)).is_some() {
                return Err(StoreError::InvalidClassTable(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self {
            names,
            is_thing,
            superclass,
            index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let file: ClassTableFile = serde_json::from_str(&text).map_err(|e| StoreError::json(path, 1, e))?;
        Self::new(file.names, file.is_thing, file.superclass)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ClassTableFile {
            names: self.names.clone(),
            is_thing: self.is_thing.clone(),
            superclass: self.superclass.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("class table serializes");
        std::fs::write(path, text).map_err(|e| StoreError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ClassId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| StoreError::UnknownClass(name.to_string()))
    }

    pub fn check(&self, id: ClassId) -> Result<ClassId> {
        if id.index() < self.names.len() {
            Ok(id)
        } else {
            Err(StoreError::ClassOutOfRange {
                id: id.0,
                len: self.names.len(),
            })
        }
    }

    /// Panics if `id` was not issued against this table.
    pub fn name(&self, id: ClassId) -> &str {
        &self.names[id.index()]
    }

    pub fn is_thing(&self, id: ClassId) -> bool {
        self.is_thing[id.index()]
    }

    pub fn superclass(&self, id: ClassId) -> &str {
        &self.superclass[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.names.len() as u32).map(ClassId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + BOX_EPS
            && self.y + self.h <= 1.0 + BOX_EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectInstance {
    pub class: ClassId,
    pub bbox: BBox,
}

/// A finegrained scene layout. The coarse label set is always derived from
/// the instances and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    id: String,
    instances: Vec<ObjectInstance>,
    coarse: BTreeSet<ClassId>,
}

impl Conditioning {
    pub fn new(id: impl Into<String>, instances: Vec<ObjectInstance>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| StoreError::InvalidConditioning {
            id: id.clone(),
            reason,
        };
        if id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if instances.is_empty() {
            return Err(invalid("no object instances".into()));
        }
        if let Some((i, inst)) = instances.iter().enumerate().find(|(_, inst)| !inst.bbox.is_valid()) {
            return Err(invalid(format!("instance {i} has an invalid box {:?}", inst.bbox)));
        }
        let coarse = instances.iter().map(|inst| inst.class).collect();
        Ok(Self { id, instances, coarse })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn instances(&self) -> &[ObjectInstance] {
        &self.instances
    }

    pub fn coarse(&self) -> &BTreeSet<ClassId> {
        &self.coarse
    }
}

pub type ConditioningMap = BTreeMap<String, Conditioning>;

/// Index conditionings by id, rejecting duplicates.
pub fn index_conditionings(conds: impl IntoIterator<Item = Conditioning>) -> Result<ConditioningMap> {
    let mut map = ConditioningMap::new();
    for cond in conds {
        let id = cond.id.clone();
        if map.insert(id.clone(), cond).is_some() {
            return Err(StoreError::DuplicateConditioning(id));
        }
    }
    Ok(map)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceLine {
    class: String,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditioningLine {
    id: String,
    instances: Vec<InstanceLine>,
}

pub fn load_conditionings(path: impl AsRef<Path>, classes: &ClassTable) -> Result<Vec<Conditioning>> {
    let path = path.as_ref();
    read_jsonl(path, |_, line: ConditioningLine| {
        let instances = line
            .instances
            .into_iter()
            .map(|inst| {
                Ok(ObjectInstance {
                    class: classes.id(&inst.class)?,
                    bbox: inst.bbox,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Conditioning::new(line.id, instances)
    })
}

pub fn save_conditionings<'a>(
    path: impl AsRef<Path>,
    conds: impl IntoIterator<Item = &'a Conditioning>,
    classes: &ClassTable,
) -> Result<()> {
    let lines = conds.into_iter().map(|c| ConditioningLine {
        id: c.id.clone(),
        instances: c
            .instances
            .iter()
            .map(|inst| InstanceLine {
                class: classes.name(inst.class).to_string(),
                bbox: inst.bbox,
            })
            .collect(),
    });
    write_jsonl(path.as_ref(), lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Scene,
    Object,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Scene => "scene",
            Granularity::Object => "object",
        })
    }
}

/// Per-row metadata of an [`EmbeddingSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingRecord {
    pub conditioning_id: String,
    pub seed: u32,
    pub kind: Kind,
    pub granularity: Granularity,
    pub object_class: Option<ClassId>,
}

impl EmbeddingRecord {
    pub fn scene(conditioning_id: impl Into<String>, seed: u32, kind: Kind) -> Self {
        Self {
            conditioning_id: conditioning_id.into(),
            seed,
            kind,
            granularity: Granularity::Scene,
            object_class: None,
        }
    }

    pub fn object(conditioning_id: impl Into<String>, seed: u32, kind: Kind, class: ClassId) -> Self {
        Self {
            conditioning_id: conditioning_id.into(),
            seed,
            kind,
            granularity: Granularity::Object,
            object_class: Some(class),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match (self.granularity, self.object_class) {
            (Granularity::Object, None) => return Err("object record without object_class".into()),
            (Granularity::Scene, Some(_)) => return Err("scene record with object_class".into()),
            _ => {}
        }
        if self.kind == Kind::Real && self.seed != 0 {
            return Err(format!("real record with seed {}", self.seed));
        }
        if self.conditioning_id.is_empty() {
            return Err("empty conditioning_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    conditioning_id: String,
    seed: u32,
    kind: Kind,
    granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object_class: Option<String>,
}

/// Feature vectors with aligned metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f32>,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f32>, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::DimMismatch { expected: 1, found: 0 });
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(StoreError::DimMismatch {
                expected: dim,
                found: vectors.len() % dim,
            });
        }
        let rows = vectors.len() / dim;
        if rows != records.len() {
            return Err(StoreError::RowCountMismatch {
                matrix: rows,
                metadata: records.len(),
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        for (row, rec) in records.iter().enumerate() {
            rec.validate()
                .map_err(|reason| StoreError::InvalidRecord { row, reason })?;
        }
        Ok(Self { dim, vectors, records })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    /// Build from explicit rows; every row must have length `dim`.
    pub fn from_rows(dim: usize, rows: &[Vec<f32>], records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            vectors.extend_from_slice(row);
        }
        Self::new(dim, vectors, records)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &EmbeddingRecord {
        &self.records[i]
    }

    /// Rows whose record satisfies `pred`, order preserved.
    pub fn filter(&self, mut pred: impl FnMut(&EmbeddingRecord) -> bool) -> EmbeddingSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| pred(&self.records[i])).collect();
        self.select(&keep)
    }

    /// Rows at `indices`, in the given order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            vectors.extend_from_slice(self.row(i));
            records.push(self.records[i].clone());
        }
        EmbeddingSet {
            dim: self.dim,
            vectors,
            records,
        }
    }

    /// Stack sets vertically. All parts must share one dimension.
    pub fn concat(parts: &[&EmbeddingSet]) -> Result<EmbeddingSet> {
        let dim = parts.first().map(|p| p.dim).ok_or(StoreError::DimMismatch {
            expected: 1,
            found: 0,
        })?;
        let mut vectors = Vec::new();
        let mut records = Vec::new();
        for part in parts {
            if part.dim != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: part.dim,
                });
            }
            vectors.extend_from_slice(&part.vectors);
            records.extend(part.records.iter().cloned());
        }
        Ok(EmbeddingSet { dim, vectors, records })
    }

    /// Same vectors, relabelled records. Used by the category merge step.
    pub(crate) fn with_records(&self, records: Vec<EmbeddingRecord>) -> Result<EmbeddingSet> {
        EmbeddingSet::new(self.dim, self.vectors.clone(), records)
    }
}

/// Matrix and metadata file locations of one embedding set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetPaths {
    pub matrix: PathBuf,
    pub metadata: PathBuf,
}

impl SetPaths {
    /// `prefix.cseb` + `prefix.meta.jsonl`
    pub fn from_prefix(prefix: impl AsRef<Path>) -> Self {
        let prefix = prefix.as_ref().as_os_str().to_owned();
        let mut matrix = prefix.clone();
        matrix.push(".cseb");
        let mut metadata = prefix;
        metadata.push(".meta.jsonl");
        Self {
            matrix: matrix.into(),
            metadata: metadata.into(),
        }
    }

    pub fn load(&self, classes: &ClassTable) -> Result<EmbeddingSet> {
        load_embedding_set(&self.matrix, &self.metadata, classes)
    }
}

pub fn load_embedding_set(
    matrix_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
    classes: &ClassTable,
) -> Result<EmbeddingSet> {
    let (rows, dim, vectors) = read_matrix(matrix_path.as_ref())?;
    let metadata_path = metadata_path.as_ref();
    let records = read_jsonl(metadata_path, |_, line: RecordLine| {
        let object_class = line.object_class.as_deref().map(|name| classes.id(name)).transpose()?;
        Ok(EmbeddingRecord {
            conditioning_id: line.conditioning_id,
            seed: line.seed,
            kind: line.kind,
            granularity: line.granularity,
            object_class,
        })
    })?;
    if records.len() != rows {
        return Err(StoreError::RowCountMismatch {
            matrix: rows,
            metadata: records.len(),
        });
    }
    EmbeddingSet::new(dim, vectors, records)
}

pub fn save_embedding_set(
    set: &EmbeddingSet,
    matrix_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
    classes: &ClassTable,
) -> Result<()> {
    write_matrix(matrix_path.as_ref(), set.len(), set.dim, &set.vectors)?;
    let lines = set.records.iter().map(|r| RecordLine {
        conditioning_id: r.conditioning_id.clone(),
        seed: r.seed,
        kind: r.kind,
        granularity: r.granularity,
        object_class: r.object_class.map(|c| classes.name(c).to_string()),
    });
    write_jsonl(metadata_path.as_ref(), lines)
}

fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(StoreError::MalformedHeader(format!(
            "file is {} bytes, shorter than the {MATRIX_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != MATRIX_MAGIC {
        return Err(StoreError::MalformedHeader("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(StoreError::MalformedHeader(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(StoreError::MalformedHeader("dim is zero".into()));
    }
    let payload = &bytes[MATRIX_HEADER_LEN..];
    let expected = usize::try_from(rows)
        .ok()
        .and_then(|r| r.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::MalformedHeader(format!("{rows}x{dim} overflows")))?;
    if payload.len() != expected {
        return Err(StoreError::MalformedHeader(format!(
            "header declares {rows}x{dim} values ({expected} bytes) but payload holds {} bytes",
            payload.len()
        )));
    }
    let vectors = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows as usize, dim, vectors))
}

fn write_matrix(path: &Path, rows: usize, dim: usize, vectors: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| StoreError::io(path, e);
    w.write_all(&MATRIX_MAGIC).map_err(io)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for v in vectors {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parse a JSON-lines file, skipping blank lines. `f` receives the 1-based
/// line number.
pub(crate) fn read_jsonl<T, U, F>(path: &Path, mut f: F) -> Result<Vec<U>>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(usize, T) -> Result<U>,
{
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| StoreError::json(path, i + 1, e))?;
        out.push(f(i + 1, value)?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| StoreError::json(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| StoreError::io(path, e))?;
    }
    w.flush().map_err(|e| StoreError::io(path, e))
}
