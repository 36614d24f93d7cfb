//! HTTP service for the labeling loop.
//!
//! Every mutation goes through one writer thread that owns the [`Project`];
//! handlers send it commands and wait for the reply. Reads are served from
//! an immutable snapshot the writer republishes after each change, so they
//! never wait on training.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, RwLock};
use std::thread;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use camtrap_core::active_learning::{check_class_name, CurvePoint, RoundOutput};
use camtrap_core::project::{
    self, now_utc, LabelRecord, Project, ProjectError, ProjectLock, ProjectState, RoundMetrics,
};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

pub const API_PREFIX: &str = "/api/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrainingStatus {
    Idle,
    Training,
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub crop_id: String,
    pub image_url: String,
    pub probs: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub round: usize,
    /// Items in the current query batch, answered or not.
    pub batch_size: usize,
    /// Unanswered items, in batch order.
    pub pending: Vec<PendingItem>,
    pub counts: PoolCounts,
    pub status: TrainingStatus,
    pub class_names: Vec<String>,
    /// True once the budget is spent or the pool is empty.
    pub complete: bool,
}

impl SessionView {
    pub fn new(state: &ProjectState, status: TrainingStatus) -> Self {
        let pending = state
            .pending_items()
            .into_iter()
            .map(|item| PendingItem {
                crop_id: item.crop_id.clone(),
                image_url: format!("{API_PREFIX}/crops/{}", item.crop_id),
                probs: item.probs.clone(),
                score: item.score,
            })
            .collect();
        SessionView {
            round: state.pool.round,
            batch_size: state.pending.as_ref().map_or(0, |b| b.items.len()),
            pending,
            counts: PoolCounts {
                labeled: state.pool.labeled.len(),
                unlabeled: state.pool.unlabeled.len(),
                budget: state.pool.label_budget,
            },
            status,
            class_names: state.class_names.clone(),
            complete: state.pending.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInput {
    pub crop_id: String,
    pub species: String,
}

/// `GET /api/v1/metrics` body: the curve so far and the latest round's
/// `metrics.json`, verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub curve: Vec<CurvePoint>,
    pub latest: RoundMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowProblem {
    pub index: usize,
    pub crop_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Vec<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                details: Vec::new(),
            },
        }
    }

    fn no_project() -> Self {
        Self::new(StatusCode::NOT_FOUND, "no_project", "no project is loaded")
    }

    fn training() -> Self {
        let mut e = Self::new(
            StatusCode::CONFLICT,
            "training",
            "training in progress; retry when status is idle",
        );
        e.body.details.push(serde_json::json!({ "status": TrainingStatus::Training }));
        e
    }

    fn invalid_rows(rows: Vec<RowProblem>) -> Self {
        let mut e = Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_labels",
            format!("{} label row(s) rejected; nothing was applied", rows.len()),
        );
        e.body.details = rows
            .into_iter()
            .map(|r| serde_json::to_value(r).expect("row serializes"))
            .collect();
        e
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    state: Option<ProjectState>,
    status: TrainingStatus,
}

enum Command {
    Labels(Vec<LabelInput>, oneshot::Sender<Result<SessionView, ApiError>>),
    Retrain(oneshot::Sender<Result<SessionView, ApiError>>),
    TrainingDone(Result<Box<RoundOutput>, String>),
}

struct Shared {
    dir: PathBuf,
    snapshot: RwLock<Arc<Snapshot>>,
    crops: BTreeMap<String, PathBuf>,
    commands: mpsc::Sender<Command>,
}

/// Handle to a running service; cheap to clone.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

impl Service {
    /// Opens the project in `dir` (if any) and starts the writer thread,
    /// which holds the project lock until the last handle is dropped.
    pub fn open(dir: &Path) -> Result<Service, ProjectError> {
        let (project, lock) = match Project::open(dir) {
            Ok(p) => (Some(p), Some(ProjectLock::acquire(dir)?)),
            Err(ProjectError::NotAProject(_)) => (None, None),
            Err(e) => return Err(e),
        };
        let crops = match &project {
            Some(p) => p
                .crops()?
                .unwrap_or_default()
                .into_iter()
                .map(|c| (c.crop_id, c.crop_path))
                .collect(),
            None => BTreeMap::new(),
        };
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            dir: dir.to_path_buf(),
            snapshot: RwLock::new(Arc::new(Snapshot {
                state: project.as_ref().map(|p| p.state.clone()),
                status: TrainingStatus::Idle,
            })),
            crops,
            commands: tx.clone(),
        });
        let writer = Writer {
            project,
            status: TrainingStatus::Idle,
            shared: Arc::downgrade(&shared),
            commands: tx,
            _lock: lock,
        };
        thread::Builder::new()
            .name("project-writer".into())
            .spawn(move || writer.run(rx))?;
        Ok(Service { shared })
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.shared.snapshot.read().expect("snapshot lock").clone()
    }

    async fn send(
        &self,
        make: impl FnOnce(oneshot::Sender<Result<SessionView, ApiError>>) -> Command,
    ) -> Result<SessionView, ApiError> {
        let (reply, wait) = oneshot::channel();
        self.shared
            .commands
            .send(make(reply))
            .map_err(|_| ApiError::internal("project writer stopped"))?;
        wait.await
            .map_err(|_| ApiError::internal("project writer dropped the request"))?
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/v1/batch", get(get_batch))
            .route("/api/v1/labels", post(post_labels))
            .route("/api/v1/retrain", post(post_retrain))
            .route("/api/v1/metrics", get(get_metrics))
            .route("/api/v1/crops/{crop_id}", get(get_crop))
            .with_state(self)
    }
}

struct Writer {
    project: Option<Project>,
    status: TrainingStatus,
    /// Weak so the writer exits once every service handle is gone.
    shared: std::sync::Weak<Shared>,
    commands: mpsc::Sender<Command>,
    _lock: Option<ProjectLock>,
}

impl Writer {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        // The writer holds a sender for the trainer, so the channel never
        // closes; poll for the last service handle going away instead.
        loop {
            match rx.recv_timeout(Duration::from_millis(100)) {
                Ok(Command::Labels(labels, reply)) => {
                    let _ = reply.send(self.apply_labels(labels));
                }
                Ok(Command::Retrain(reply)) => {
                    let _ = reply.send(self.retrain());
                }
                Ok(Command::TrainingDone(result)) => self.finish_training(result),
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
            if self.shared.strong_count() == 0 && self.status != TrainingStatus::Training {
                break;
            }
        }
    }

    fn publish(&self) {
        if let Some(shared) = self.shared.upgrade() {
            *shared.snapshot.write().expect("snapshot lock") = Arc::new(Snapshot {
                state: self.project.as_ref().map(|p| p.state.clone()),
                status: self.status.clone(),
            });
        }
    }

    fn view(&self) -> Result<SessionView, ApiError> {
        let project = self.project.as_ref().ok_or_else(ApiError::no_project)?;
        Ok(SessionView::new(&project.state, self.status.clone()))
    }

    fn apply_labels(&mut self, labels: Vec<LabelInput>) -> Result<SessionView, ApiError> {
        if self.status == TrainingStatus::Training {
            return Err(ApiError::training());
        }
        let project = self.project.as_mut().ok_or_else(ApiError::no_project)?;
        let rows = validate_labels(&project.state, &labels);
        if !rows.is_empty() {
            return Err(ApiError::invalid_rows(rows));
        }
        if labels.is_empty() {
            return self.view();
        }
        let now = now_utc();
        let records: Vec<LabelRecord> = labels
            .into_iter()
            .map(|l| LabelRecord {
                crop_id: l.crop_id,
                class_name: l.species,
                labeler: "api".into(),
                timestamp_utc: now,
            })
            .collect();
        project.apply_labels(&records).map_err(ApiError::internal)?;
        if project.state.batch_complete() {
            self.start_training();
        } else if matches!(self.status, TrainingStatus::Error { .. }) {
            self.status = TrainingStatus::Idle;
        }
        self.publish();
        self.view()
    }

    fn retrain(&mut self) -> Result<SessionView, ApiError> {
        if self.status == TrainingStatus::Training {
            return Err(ApiError::training());
        }
        let project = self.project.as_ref().ok_or_else(ApiError::no_project)?;
        if project.state.pool.labeled.is_empty() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "no_labels",
                "label at least one crop before retraining",
            ));
        }
        self.start_training();
        self.publish();
        self.view()
    }

    fn start_training(&mut self) {
        let Some(project) = &self.project else { return };
        let state = project.state.clone();
        let features = project.features.clone();
        let done = self.commands.clone();
        self.status = TrainingStatus::Training;
        let spawned = thread::Builder::new().name("trainer".into()).spawn(move || {
            let result = project::compute_round(&state, &features)
                .map(Box::new)
                .map_err(|e| e.to_string());
            let _ = done.send(Command::TrainingDone(result));
        });
        if let Err(e) = spawned {
            self.status = TrainingStatus::Error {
                message: format!("cannot start training: {e}"),
            };
        }
    }

    fn finish_training(&mut self, result: Result<Box<RoundOutput>, String>) {
        let Some(project) = self.project.as_mut() else { return };
        self.status = match result.and_then(|out| project.commit_round(*out).map_err(|e| e.to_string())) {
            Ok(record) => {
                log::info!(
                    "round {} trained on {} labels, macro F1 {:.3}",
                    record.round,
                    record.point.labels_used,
                    record.point.macro_f1
                );
                TrainingStatus::Idle
            }
            Err(message) => {
                log::error!("training failed: {message}");
                TrainingStatus::Error { message }
            }
        };
        self.publish();
    }
}

/// Every problem with a label submission, by request index.
fn validate_labels(state: &ProjectState, labels: &[LabelInput]) -> Vec<RowProblem> {
    let open: HashSet<&str> = state
        .pending_items()
        .into_iter()
        .map(|i| i.crop_id.as_str())
        .collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (index, label) in labels.iter().enumerate() {
        let reason = if !seen.insert(label.crop_id.as_str()) {
            Some("crop id appears more than once in the request".to_string())
        } else if state.pool.labeled.contains_key(&label.crop_id) {
            Some("crop is already labeled".to_string())
        } else if !open.contains(label.crop_id.as_str()) {
            Some("crop is not in the current query batch".to_string())
        } else {
            check_class_name(&label.species, &state.class_names).err()
        };
        if let Some(reason) = reason {
            rows.push(RowProblem {
                index,
                crop_id: label.crop_id.clone(),
                reason,
            });
        }
    }
    rows
}

async fn get_batch(State(service): State<Service>) -> Result<Json<SessionView>, ApiError> {
    let snap = service.snapshot();
    let state = snap.state.as_ref().ok_or_else(ApiError::no_project)?;
    if snap.status == TrainingStatus::Training {
        return Err(ApiError::training());
    }
    Ok(Json(SessionView::new(state, snap.status.clone())))
}

async fn post_labels(
    State(service): State<Service>,
    body: Result<Json<Vec<LabelInput>>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let Json(labels) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    service.send(|reply| Command::Labels(labels, reply)).await.map(Json)
}

async fn post_retrain(State(service): State<Service>) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let view = service.send(Command::Retrain).await?;
    Ok((StatusCode::ACCEPTED, Json(view)))
}

async fn get_metrics(State(service): State<Service>) -> Result<Json<MetricsView>, ApiError> {
    let snap = service.snapshot();
    let state = snap.state.as_ref().ok_or_else(ApiError::no_project)?;
    let last = state.history.last().ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "no_rounds", "no training round has completed yet")
    })?;
    let raw = tokio::fs::read(service.shared.dir.join(&last.metrics))
        .await
        .map_err(ApiError::internal)?;
    let latest: RoundMetrics = serde_json::from_slice(&raw).map_err(ApiError::internal)?;
    Ok(Json(MetricsView {
        curve: state.curve().points,
        latest,
    }))
}

async fn get_crop(State(service): State<Service>, UrlPath(crop_id): UrlPath<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown crop {crop_id}"));
    let path = service.shared.crops.get(&crop_id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(path).await.map_err(|_| not_found())?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

/// Serves the project in `dir` on `addr` until Ctrl-C.
pub async fn serve(dir: &Path, addr: SocketAddr) -> Result<(), crate::CliError> {
    let service = Service::open(dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", dir.display(), listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
