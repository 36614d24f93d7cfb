//! On-disk project: pool state, labels, round artifacts.
//!
//! ```text
//! <dir>/project.json         state + config (format_version 1)
//! <dir>/labels.csv           label export, Timelapse-style columns
//! <dir>/embeddings.emb1      EMB1 embedding store
//! <dir>/crops.csv            crop manifest (optional)
//! <dir>/rounds/NNNN/         model.alhd1, metrics.json, query.json
//! ```
//!
//! Mutable files are replaced by write-temp-then-rename. Round directories
//! are written once and never touched again.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_learning::{
    self, ActiveLearningError, CurvePoint, FeatureTable, LabelProblem, LearningCurve, PoolState,
    QueryBatch, QueryItem, RoundContext, RoundOutput, Strategy,
};
use crate::classifier::{ClassifierError, HeadModel, TrainConfig};
use crate::detection::{self, CropRecord, IngestError};
use crate::embedding::{EmbeddingError, EmbeddingStore};
use crate::evaluation::{ConfusionMatrix, MetricsReport};

pub const FORMAT_VERSION: u32 = 1;
pub const PROJECT_FILE: &str = "project.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb1";
pub const CROPS_FILE: &str = "crops.csv";
pub const ROUNDS_DIR: &str = "rounds";
pub const LOCK_FILE: &str = ".lock";
pub const MODEL_FILE: &str = "model.alhd1";
pub const METRICS_FILE: &str = "metrics.json";
pub const QUERY_FILE: &str = "query.json";
pub const LABELS_HEADER: &str = "File,RelativePath,CropId,Species,Labeler,TimestampUTC";

#[derive(Error, Debug)]
pub enum ProjectError {
    #[error("{0} is not a project (no {PROJECT_FILE})")]
    NotAProject(PathBuf),
    #[error("{path} already contains a project")]
    AlreadyExists { path: PathBuf },
    #[error("project format version {found} cannot be migrated; this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("project references missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("project is locked by {holder:?}; delete {path} if no other process is running")]
    Locked { path: PathBuf, holder: String },
    #[error("round {round} artifacts already exist with different contents")]
    HistoryRewrite { round: usize },
    #[error("corrupt project: {0}")]
    Corrupt(String),
    #[error("label import rejected: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Import(Vec<RowError>),
    #[error("no rounds completed yet")]
    NoRounds,
    #[error(transparent)]
    ActiveLearning(#[from] ActiveLearningError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A rejected row of a label CSV. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub crop_id: String,
    pub reason: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {} ({}): {}", self.line, self.crop_id, self.reason)
    }
}

/// Who labeled a crop and when (UTC seconds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMeta {
    pub labeler: String,
    pub timestamp_utc: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub crop_id: String,
    pub class_name: String,
    pub labeler: String,
    pub timestamp_utc: i64,
}

pub fn format_timestamp(secs: i64) -> String {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Result<i64, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc).timestamp())
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

pub fn now_utc() -> i64 {
    Utc::now().timestamp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub train: TrainConfig,
    /// Size of the uniform random seed batch in live projects.
    pub seed_set_size: usize,
}

/// Artifact paths (relative to the project) and curve point for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub point: CurvePoint,
    pub model: String,
    pub metrics: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub format_version: u32,
    pub project_id: String,
    pub class_names: Vec<String>,
    pub embeddings_path: String,
    pub crop_manifest_path: Option<String>,
    pub pool: PoolState,
    /// Held-out labeled crops, never queried. crop id → class name.
    pub validation: BTreeMap<String, String>,
    /// Query batch awaiting labels; `None` once the loop has finished.
    pub pending: Option<QueryBatch>,
    pub history: Vec<RoundRecord>,
    pub label_meta: BTreeMap<String, LabelMeta>,
    pub config: ProjectConfig,
}

impl ProjectState {
    pub fn check_invariants(&self) -> Result<(), ProjectError> {
        if self.history.len() != self.pool.round {
            return Err(ProjectError::Corrupt(format!(
                "{} round records for round {}",
                self.history.len(),
                self.pool.round
            )));
        }
        self.pool.check_disjoint()?;
        let overlap: Vec<&String> = self
            .validation
            .keys()
            .filter(|id| self.pool.labeled.contains_key(*id) || self.pool.unlabeled.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(ProjectError::Corrupt(format!("validation ids in pool: {overlap:?}")));
        }
        Ok(())
    }

    /// Items of the pending batch that still need a label, in batch order.
    pub fn pending_items(&self) -> Vec<&QueryItem> {
        self.pending
            .iter()
            .flat_map(|b| &b.items)
            .filter(|i| !self.pool.labeled.contains_key(&i.crop_id))
            .collect()
    }

    pub fn batch_complete(&self) -> bool {
        self.pending.is_some() && self.pending_items().is_empty()
    }

    pub fn curve(&self) -> LearningCurve {
        LearningCurve {
            points: self.history.iter().map(|r| r.point).collect(),
        }
    }

    pub fn validation_pairs(&self) -> Vec<(String, usize)> {
        self.validation
            .iter()
            .filter_map(|(id, class)| {
                self.class_names
                    .iter()
                    .position(|c| c == class)
                    .map(|i| (id.clone(), i))
            })
            .collect()
    }

    pub fn label_records(&self) -> Vec<LabelRecord> {
        self.pool
            .labeled
            .iter()
            .map(|(id, class)| {
                let meta = self.label_meta.get(id);
                LabelRecord {
                    crop_id: id.clone(),
                    class_name: class.clone(),
                    labeler: meta.map(|m| m.labeler.clone()).unwrap_or_default(),
                    timestamp_utc: meta.map(|m| m.timestamp_utc).unwrap_or(0),
                }
            })
            .collect()
    }

    /// Applies labels through the pool's atomic rules and records provenance.
    pub fn apply_labels(&mut self, labels: &[LabelRecord]) -> Result<(), ProjectError> {
        let pairs: Vec<(String, String)> = labels
            .iter()
            .map(|l| (l.crop_id.clone(), l.class_name.clone()))
            .collect();
        self.pool = active_learning::apply_labels(&self.pool, &pairs, &self.class_names)?;
        for l in labels {
            self.label_meta.insert(
                l.crop_id.clone(),
                LabelMeta {
                    labeler: l.labeler.clone(),
                    timestamp_utc: l.timestamp_utc,
                },
            );
        }
        Ok(())
    }
}

/// Contents of `rounds/NNNN/metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub labels_used: usize,
    pub point: CurvePoint,
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
}

/// Contents of `rounds/NNNN/query.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAudit {
    pub round: usize,
    pub strategy: Strategy,
    pub labels_used: usize,
    pub complete: bool,
    pub items: Vec<QueryItem>,
}

pub fn round_dir_name(round: usize) -> String {
    format!("{ROUNDS_DIR}/{round:04}")
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Exclusive writer lock on a project directory, released on drop.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl ProjectLock {
    pub fn acquire(dir: &Path) -> Result<Self, ProjectError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "pid {}", std::process::id())?;
                Ok(ProjectLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default().trim().to_string();
                Err(ProjectError::Locked { path, holder })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Persists `state` to `dir/project.json` and refreshes `labels.csv`.
pub fn save_project(dir: &Path, state: &ProjectState) -> Result<(), ProjectError> {
    state.check_invariants()?;
    let crops = load_crop_manifest(dir, state)?;
    let mut labels = Vec::new();
    export_labels_csv(state, crops.as_deref(), &mut labels)?;
    write_atomic(&dir.join(LABELS_FILE), &labels)?;
    let json = serde_json::to_vec_pretty(state)?;
    write_atomic(&dir.join(PROJECT_FILE), &json)?;
    Ok(())
}

pub fn load_project(dir: &Path) -> Result<ProjectState, ProjectError> {
    let path = dir.join(PROJECT_FILE);
    if !path.is_file() {
        return Err(ProjectError::NotAProject(dir.to_path_buf()));
    }
    let raw = fs::read(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ProjectError::Corrupt("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(ProjectError::VersionMismatch {
            found: found as u32,
            supported: FORMAT_VERSION,
        });
    }
    let state: ProjectState = serde_json::from_value(value)?;

    let mut referenced = vec![dir.join(&state.embeddings_path)];
    referenced.extend(state.crop_manifest_path.iter().map(|p| dir.join(p)));
    for r in &state.history {
        referenced.extend([&r.model, &r.metrics, &r.query].map(|p| dir.join(p)));
    }
    let missing: Vec<PathBuf> = referenced.into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(ProjectError::MissingFiles(missing));
    }
    state.check_invariants()?;
    Ok(state)
}

fn load_crop_manifest(dir: &Path, state: &ProjectState) -> Result<Option<Vec<CropRecord>>, ProjectError> {
    match &state.crop_manifest_path {
        Some(p) => {
            let f = File::open(dir.join(p))?;
            Ok(Some(detection::read_manifest(f, dir)?))
        }
        None => Ok(None),
    }
}

fn split_source(source: &str) -> (String, String) {
    match source.rfind(['/', '\\']) {
        Some(i) => (source[i + 1..].to_string(), source[..i].to_string()),
        None => (source.to_string(), String::new()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    #[serde(rename = "File")]
    file: String,
    #[serde(rename = "RelativePath")]
    relative_path: String,
    #[serde(rename = "CropId")]
    crop_id: String,
    #[serde(rename = "Species")]
    species: String,
    #[serde(rename = "Labeler")]
    labeler: String,
    #[serde(rename = "TimestampUTC")]
    timestamp: String,
}

/// One row per labeled crop, ordered by crop id. `File`/`RelativePath` come
/// from the crop manifest when one is available.
pub fn export_labels_csv<W: Write>(
    state: &ProjectState,
    crops: Option<&[CropRecord]>,
    writer: W,
) -> Result<(), ProjectError> {
    let sources: BTreeMap<&str, &str> = crops
        .unwrap_or_default()
        .iter()
        .map(|c| (c.crop_id.as_str(), c.source_image.as_str()))
        .collect();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(LABELS_HEADER.split(','))?;
    for rec in state.label_records() {
        let (file, relative_path) = sources
            .get(rec.crop_id.as_str())
            .map(|s| split_source(s))
            .unwrap_or_default();
        w.serialize(LabelRow {
            file,
            relative_path,
            crop_id: rec.crop_id,
            species: rec.class_name,
            labeler: rec.labeler,
            timestamp: format_timestamp(rec.timestamp_utc),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Parses and validates a label CSV against `class_names`. Every bad row is
/// reported; nothing is returned unless all rows are valid.
pub fn read_labels_csv<R: Read>(reader: R, class_names: &[String]) -> Result<Vec<LabelRecord>, ProjectError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != LABELS_HEADER {
        return Err(ProjectError::Import(vec![RowError {
            line: 1,
            crop_id: String::new(),
            reason: format!("expected header {LABELS_HEADER:?}, found {header:?}"),
        }]));
    }
    let mut errors = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in r.deserialize::<LabelRow>() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError {
                    line,
                    crop_id: String::new(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        // Header is line 1; records follow in order.
        let line = records.len() as u64 + errors.len() as u64 + 2;
        let mut fail = |reason: String| {
            errors.push(RowError {
                line,
                crop_id: row.crop_id.clone(),
                reason,
            })
        };
        if !seen.insert(row.crop_id.clone()) {
            fail("duplicate CropId".into());
            continue;
        }
        if let Err(reason) = active_learning::check_class_name(&row.species, class_names) {
            fail(reason);
            continue;
        }
        let timestamp_utc = match parse_timestamp(&row.timestamp) {
            Ok(t) => t,
            Err(reason) => {
                fail(reason);
                continue;
            }
        };
        records.push(LabelRecord {
            crop_id: row.crop_id,
            class_name: row.species,
            labeler: row.labeler,
            timestamp_utc,
        });
    }
    if !errors.is_empty() {
        return Err(ProjectError::Import(errors));
    }
    Ok(records)
}

/// Reads a label CSV and applies it to `state` atomically. On any error the
/// state is unchanged.
pub fn import_labels_csv<R: Read>(reader: R, state: &mut ProjectState) -> Result<Vec<LabelRecord>, ProjectError> {
    let records = read_labels_csv(reader, &state.class_names)?;
    let mut next = state.clone();
    next.apply_labels(&records).map_err(|e| match e {
        ProjectError::ActiveLearning(ActiveLearningError::InvalidLabels(problems)) => {
            ProjectError::Import(problems_to_rows(&records, problems))
        }
        other => other,
    })?;
    *state = next;
    Ok(records)
}

fn problems_to_rows(records: &[LabelRecord], problems: Vec<LabelProblem>) -> Vec<RowError> {
    problems
        .into_iter()
        .map(|p| RowError {
            line: records
                .iter()
                .position(|r| r.crop_id == p.crop_id)
                .map(|i| i as u64 + 2)
                .unwrap_or(0),
            crop_id: p.crop_id,
            reason: p.reason,
        })
        .collect()
}

/// Parameters for a new project over an existing `embeddings.emb1`.
#[derive(Debug, Clone)]
pub struct ProjectInit {
    pub project_id: String,
    pub class_names: Vec<String>,
    pub label_budget: usize,
    pub batch_size_query: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub train: TrainConfig,
    /// Held-out labeled crops; removed from the pool.
    pub validation: BTreeMap<String, String>,
    /// Uniform random seed batch size; defaults to two per class.
    pub seed_set_size: Option<usize>,
}

/// A loaded project with its features, ready to run rounds.
#[derive(Debug, Clone)]
pub struct Project {
    pub dir: PathBuf,
    pub state: ProjectState,
    /// Shared so background training can borrow it without a copy.
    pub features: Arc<FeatureTable>,
}

impl Project {
    /// Creates a project in `dir`, which must already hold the embedding
    /// store (and optionally the crop manifest). The first pending batch is a
    /// uniform random seed set.
    pub fn create(dir: &Path, init: ProjectInit) -> Result<Project, ProjectError> {
        if dir.join(PROJECT_FILE).exists() {
            return Err(ProjectError::AlreadyExists {
                path: dir.to_path_buf(),
            });
        }
        let store = EmbeddingStore::from_bytes(&fs::read(dir.join(EMBEDDINGS_FILE))?)?;
        let features = FeatureTable::from_store(&store);
        for (id, class) in &init.validation {
            if !store.contains(id) {
                return Err(ActiveLearningError::MissingFeatures(id.clone()).into());
            }
            active_learning::check_class_name(class, &init.class_names).map_err(|reason| {
                ActiveLearningError::InvalidLabels(vec![LabelProblem {
                    crop_id: id.clone(),
                    reason,
                }])
            })?;
        }
        let pool_ids: Vec<String> = store
            .ids()
            .filter(|id| !init.validation.contains_key(*id))
            .map(str::to_string)
            .collect();
        let seed_size = init.seed_set_size.unwrap_or(2 * init.class_names.len());
        let seed_ids = active_learning::random_seed_set(&pool_ids, seed_size, init.seed);
        let pool = PoolState::new(
            pool_ids,
            init.label_budget,
            init.strategy,
            init.batch_size_query,
            init.seed,
        )?;
        let crop_manifest_path = dir.join(CROPS_FILE).is_file().then(|| CROPS_FILE.to_string());
        let state = ProjectState {
            format_version: FORMAT_VERSION,
            project_id: init.project_id,
            class_names: init.class_names,
            embeddings_path: EMBEDDINGS_FILE.to_string(),
            crop_manifest_path,
            pool,
            validation: init.validation,
            pending: Some(QueryBatch {
                round: 0,
                items: seed_ids
                    .into_iter()
                    .map(|crop_id| QueryItem {
                        crop_id,
                        score: 0.0,
                        probs: Vec::new(),
                    })
                    .collect(),
            }),
            history: Vec::new(),
            label_meta: BTreeMap::new(),
            config: ProjectConfig {
                train: init.train,
                seed_set_size: seed_size,
            },
        };
        save_project(dir, &state)?;
        Ok(Project {
            dir: dir.to_path_buf(),
            state,
            features: Arc::new(features),
        })
    }

    pub fn open(dir: &Path) -> Result<Project, ProjectError> {
        let state = load_project(dir)?;
        let store = EmbeddingStore::from_bytes(&fs::read(dir.join(&state.embeddings_path))?)?;
        Ok(Project {
            dir: dir.to_path_buf(),
            state,
            features: Arc::new(FeatureTable::from_store(&store)),
        })
    }

    pub fn save(&self) -> Result<(), ProjectError> {
        save_project(&self.dir, &self.state)
    }

    pub fn crops(&self) -> Result<Option<Vec<CropRecord>>, ProjectError> {
        load_crop_manifest(&self.dir, &self.state)
    }

    /// Retrains and scores without touching disk. Pure given the state.
    pub fn compute_round(&self) -> Result<RoundOutput, ProjectError> {
        compute_round(&self.state, &self.features)
    }

    /// Writes the round's artifacts, advances the state and saves it.
    pub fn commit_round(&mut self, out: RoundOutput) -> Result<RoundRecord, ProjectError> {
        let record = write_round_artifacts(&self.dir, &self.state, &out)?;
        let mut next = self.state.clone();
        next.pool = out.state;
        next.pending = out.batch;
        next.history.push(record.clone());
        save_project(&self.dir, &next)?;
        self.state = next;
        Ok(record)
    }

    pub fn run_round(&mut self) -> Result<RoundRecord, ProjectError> {
        let out = self.compute_round()?;
        self.commit_round(out)
    }

    pub fn apply_labels(&mut self, labels: &[LabelRecord]) -> Result<(), ProjectError> {
        let mut next = self.state.clone();
        next.apply_labels(labels)?;
        save_project(&self.dir, &next)?;
        self.state = next;
        Ok(())
    }

    pub fn latest_metrics(&self) -> Result<RoundMetrics, ProjectError> {
        let last = self.state.history.last().ok_or(ProjectError::NoRounds)?;
        Ok(serde_json::from_slice(&fs::read(self.dir.join(&last.metrics))?)?)
    }

    pub fn latest_model(&self) -> Result<HeadModel, ProjectError> {
        let last = self.state.history.last().ok_or(ProjectError::NoRounds)?;
        Ok(HeadModel::load(&self.dir.join(&last.model))?)
    }
}

/// Ground-truth label file written next to synthetic projects.
pub const ORACLE_FILE: &str = "oracle.csv";

/// Builds a project over the synthetic benchmark pool for `seed`: writes
/// `embeddings.emb1`, holds out the stratified validation split and writes
/// every pool label to `oracle.csv` for replay.
pub fn create_synthetic_project(
    dir: &Path,
    seed: u64,
    label_budget: usize,
    strategy: Strategy,
) -> Result<Project, ProjectError> {
    if dir.join(PROJECT_FILE).exists() {
        return Err(ProjectError::AlreadyExists {
            path: dir.to_path_buf(),
        });
    }
    let data = active_learning::benchmark_data(seed);
    let config = active_learning::benchmark_config(strategy, seed);
    fs::create_dir_all(dir)?;

    let mut store = EmbeddingStore::new(data.features.dim(), format!("synthetic-benchmark/seed{seed}"))?;
    for id in data.features.ids() {
        let row = data.features.get(id).expect("id listed by table");
        store.insert(id, row.iter().map(|&v| v as f32).collect())?;
    }
    store.save(&dir.join(EMBEDDINGS_FILE))?;

    let name = |label: usize| data.class_names[label].clone();
    let mut oracle = ProjectState {
        format_version: FORMAT_VERSION,
        project_id: String::new(),
        class_names: data.class_names.clone(),
        embeddings_path: EMBEDDINGS_FILE.into(),
        crop_manifest_path: None,
        pool: PoolState::new(Vec::new(), 0, strategy, 1, seed)?,
        validation: BTreeMap::new(),
        pending: None,
        history: Vec::new(),
        label_meta: BTreeMap::new(),
        config: ProjectConfig {
            train: config.train.clone(),
            seed_set_size: 0,
        },
    };
    for (id, &label) in &data.pool {
        oracle.pool.labeled.insert(id.clone(), name(label));
        oracle.label_meta.insert(
            id.clone(),
            LabelMeta {
                labeler: "oracle".into(),
                timestamp_utc: 0,
            },
        );
    }
    let mut csv = Vec::new();
    export_labels_csv(&oracle, None, &mut csv)?;
    write_atomic(&dir.join(ORACLE_FILE), &csv)?;

    Project::create(
        dir,
        ProjectInit {
            project_id: format!("synthetic-{seed}"),
            class_names: data.class_names.clone(),
            label_budget,
            batch_size_query: config.batch_size_query,
            strategy,
            seed,
            train: config.train,
            validation: data.validation.iter().map(|(id, l)| (id.clone(), name(*l))).collect(),
            seed_set_size: None,
        },
    )
}

/// Runs one active-learning round for `state` over `features`.
pub fn compute_round(state: &ProjectState, features: &FeatureTable) -> Result<RoundOutput, ProjectError> {
    let validation = state.validation_pairs();
    let ctx = RoundContext {
        features,
        class_names: &state.class_names,
        validation: &validation,
        train: &state.config.train,
    };
    Ok(active_learning::run_round(&state.pool, &ctx)?)
}

fn write_round_artifacts(dir: &Path, state: &ProjectState, out: &RoundOutput) -> Result<RoundRecord, ProjectError> {
    let round = out.state.round;
    let rel = round_dir_name(round);
    let metrics = RoundMetrics {
        round,
        labels_used: out.point.labels_used,
        point: out.point,
        report: out.report.clone(),
        confusion: out.confusion.clone(),
    };
    let query = QueryAudit {
        round,
        strategy: state.pool.strategy,
        labels_used: out.point.labels_used,
        complete: out.batch.is_none(),
        items: out.batch.as_ref().map(|b| b.items.clone()).unwrap_or_default(),
    };
    let files: [(&str, Vec<u8>); 3] = [
        (MODEL_FILE, out.model.to_bytes()),
        (METRICS_FILE, serde_json::to_vec_pretty(&metrics)?),
        (QUERY_FILE, serde_json::to_vec_pretty(&query)?),
    ];

    let target = dir.join(&rel);
    if target.exists() {
        // A crash after writing artifacts but before saving state leaves the
        // directory behind; deterministic retraining reproduces it exactly.
        for (name, bytes) in &files {
            if fs::read(target.join(name)).ok().as_deref() != Some(bytes.as_slice()) {
                return Err(ProjectError::HistoryRewrite { round });
            }
        }
    } else {
        let staging = dir.join(format!("{rel}.tmp"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        for (name, bytes) in &files {
            let mut f = File::create(staging.join(name))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&staging, &target)?;
    }
    Ok(RoundRecord {
        round,
        point: out.point,
        model: format!("{rel}/{MODEL_FILE}"),
        metrics: format!("{rel}/{METRICS_FILE}"),
        query: format!("{rel}/{QUERY_FILE}"),
    })
}
