//! Command-line front end. Every command works on the project directory given
//! by `--project` or `CAMTRAP_PROJECT`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use camtrap_core::active_learning::{self, ActiveLearningError, Strategy};
use camtrap_core::classifier::{self, ClassifierError, TrainConfig};
use camtrap_core::detection::{self, Category, IngestConfig, IngestError};
use camtrap_core::embedding::{self, EmbeddingError, PrecomputedProvider, SyntheticProvider};
use camtrap_core::evaluation::{self, EvaluationError};
use camtrap_core::project::{
    self, Project, ProjectError, ProjectInit, ProjectLock, CROPS_FILE, EMBEDDINGS_FILE, PROJECT_FILE,
};
use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    ActiveLearning(#[from] ActiveLearningError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "camtrap", version, about = "Active-learning species labeling for camera-trap crops")]
pub struct Cli {
    /// Project directory.
    #[arg(long, global = true, env = "CAMTRAP_PROJECT", default_value = ".")]
    pub project: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Seeded Gaussian vectors keyed by crop content.
    Synthetic,
    /// Vectors from an existing EMB1 file.
    Precomputed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut crops out of images using a detector output file.
    Ingest {
        detections: PathBuf,
        image_dir: PathBuf,
        #[arg(long, default_value_t = detection::DEFAULT_MIN_CONFIDENCE)]
        min_confidence: f64,
        #[arg(long, default_value_t = detection::DEFAULT_PADDING_FRAC)]
        padding: f64,
        /// Comma-separated detector categories to keep.
        #[arg(long, value_delimiter = ',', default_value = "animal")]
        categories: Vec<String>,
    },
    /// Embed every ingested crop into the project's embedding store.
    Embed {
        #[arg(long, value_enum)]
        provider: ProviderKind,
        /// EMB1 file for the precomputed provider.
        #[arg(long, required_if_eq("provider", "precomputed"))]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = embedding::DEFAULT_SYNTHETIC_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// L2-normalize vectors before storing.
        #[arg(long)]
        normalize: bool,
    },
    /// Create a project over the embedding store.
    InitProject {
        /// Comma-separated species names.
        #[arg(long, value_delimiter = ',', required_unless_present = "synthetic")]
        classes: Vec<String>,
        /// Build the synthetic benchmark pool instead (writes oracle.csv).
        #[arg(long, conflicts_with_all = ["classes", "validation"])]
        synthetic: bool,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = active_learning::DEFAULT_BATCH_SIZE_QUERY)]
        batch_size: usize,
        #[arg(long, default_value = "entropy")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Held-out labels in the label CSV format.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Size of the initial random batch; two per class by default.
        #[arg(long)]
        seed_set_size: Option<usize>,
    },
    /// Run the loop on the synthetic benchmark with oracle answers.
    Simulate {
        #[arg(long, default_value = "entropy")]
        strategy: String,
        /// Total labels including the seed set; the whole pool by default.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Learning-curve CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-round query audit as JSON.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Print the current query batch.
    Batch,
    /// Train on the current labels and commit a round.
    Train,
    /// Score the latest model against a label CSV.
    Evaluate {
        labels: PathBuf,
        #[arg(long)]
        confusion_csv: Option<PathBuf>,
        /// List classes whose F1 falls below this value.
        #[arg(long, default_value_t = 0.5)]
        flag_threshold: f64,
    },
    /// Write the learning curve as CSV.
    ExportCurve {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write all labels as CSV.
    ExportLabels {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply labels from a CSV; all rows or none.
    ImportLabels { file: PathBuf },
    /// Serve the labeling API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    s.parse().map_err(|e: ActiveLearningError| CliError::Usage(e.to_string()))
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => project::write_atomic(path, bytes)?,
        None => io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(None, text.as_bytes())
}

fn lock(dir: &Path) -> Result<ProjectLock, CliError> {
    fs::create_dir_all(dir)?;
    Ok(ProjectLock::acquire(dir)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let dir = cli.project.as_path();
    match cli.command {
        Command::Ingest {
            detections,
            image_dir,
            min_confidence,
            padding,
            categories,
        } => {
            let allowed_categories = categories
                .iter()
                .map(|c| Category::from_name(c).ok_or_else(|| CliError::Usage(format!("unknown category {c:?}"))))
                .collect::<Result<_, _>>()?;
            let config = IngestConfig {
                min_confidence,
                allowed_categories,
                padding_frac: padding,
            };
            let _lock = lock(dir)?;
            let raw = fs::read(&detections)?;
            let outcome = detection::ingest(&raw, &image_dir, &dir.join("crops"), &config)?;
            let mut manifest = Vec::new();
            detection::write_manifest(&mut manifest, &outcome.crops, dir)?;
            project::write_atomic(&dir.join(CROPS_FILE), &manifest)?;
            for e in &outcome.errors {
                eprintln!("warning: {e}");
            }
            println!("{}", outcome.summary.to_json());
            if outcome.crops.is_empty() && !outcome.errors.is_empty() {
                return Err(CliError::Data(format!("no crops written; {} failure(s)", outcome.errors.len())));
            }
            Ok(())
        }
        Command::Embed {
            provider,
            file,
            dim,
            seed,
            normalize,
        } => {
            let _lock = lock(dir)?;
            if dir.join(PROJECT_FILE).exists() {
                return Err(CliError::Data(format!(
                    "{} already has a project; its embeddings are fixed",
                    dir.display()
                )));
            }
            let raw = fs::read(dir.join(CROPS_FILE))
                .map_err(|e| CliError::Data(format!("cannot read {CROPS_FILE}: {e}; run ingest first")))?;
            let crops = detection::read_manifest(raw.as_slice(), dir)?;
            let report = match provider {
                ProviderKind::Synthetic => {
                    embedding::embed_batch(&SyntheticProvider { dim, seed }, &crops, normalize)?
                }
                ProviderKind::Precomputed => {
                    let file = file.ok_or_else(|| CliError::Usage("--file is required".into()))?;
                    embedding::embed_batch(&PrecomputedProvider::open(&file)?, &crops, normalize)?
                }
            };
            for (id, reason) in &report.skipped {
                eprintln!("warning: skipped {id}: {reason}");
            }
            report.store.save(&dir.join(EMBEDDINGS_FILE))?;
            print_json(&serde_json::json!({
                "embedded": report.store.len(),
                "skipped": report.skipped.len(),
                "dim": report.store.dim(),
                "provider": report.store.provider_tag(),
            }))
        }
        Command::InitProject {
            classes,
            synthetic,
            budget,
            batch_size,
            strategy,
            seed,
            epochs,
            validation,
            seed_set_size,
        } => {
            let strategy = parse_strategy(&strategy)?;
            let budget = budget.unwrap_or(usize::MAX);
            let _lock = lock(dir)?;
            let project = if synthetic {
                project::create_synthetic_project(dir, seed, budget, strategy)?
            } else {
                let validation = match validation {
                    Some(path) => project::read_labels_csv(fs::File::open(path)?, &classes)?
                        .into_iter()
                        .map(|r| (r.crop_id, r.class_name))
                        .collect(),
                    None => BTreeMap::new(),
                };
                let mut train = TrainConfig {
                    seed,
                    ..TrainConfig::default()
                };
                if let Some(epochs) = epochs {
                    train.epochs = epochs;
                }
                Project::create(
                    dir,
                    ProjectInit {
                        project_id: dir
                            .canonicalize()?
                            .file_name()
                            .map_or_else(|| "project".into(), |n| n.to_string_lossy().into_owned()),
                        class_names: classes,
                        label_budget: budget,
                        batch_size_query: batch_size,
                        strategy,
                        seed,
                        train,
                        validation,
                        seed_set_size,
                    },
                )?
            };
            print_session(&project)
        }
        Command::Simulate {
            strategy,
            budget,
            seed,
            out,
            audit,
        } => {
            let strategy = parse_strategy(&strategy)?;
            let data = active_learning::benchmark_data(seed);
            let mut config = active_learning::benchmark_config(strategy, seed);
            if let Some(budget) = budget {
                config.label_budget = budget;
            }
            let outcome = active_learning::simulate(&data, &config)?;
            if let Some(path) = audit {
                project::write_atomic(&path, serde_json::to_string_pretty(&outcome.rounds)?.as_bytes())?;
            }
            write_output(out.as_deref(), outcome.curve.to_csv().as_bytes())
        }
        Command::Batch => print_session(&Project::open(dir)?),
        Command::Train => {
            let _lock = lock(dir)?;
            let mut project = Project::open(dir)?;
            if project.state.pool.labeled.is_empty() {
                return Err(CliError::Data("no labels yet; label the pending batch first".into()));
            }
            let record = project.run_round()?;
            print_json(&record)
        }
        Command::Evaluate {
            labels,
            confusion_csv,
            flag_threshold,
        } => {
            let project = Project::open(dir)?;
            let model = project.latest_model()?;
            let truth = project::read_labels_csv(fs::File::open(&labels)?, &project.state.class_names)?;
            let store = embedding::EmbeddingStore::from_bytes(&fs::read(dir.join(&project.state.embeddings_path))?)?;
            let ids: Vec<String> = truth.iter().map(|r| r.crop_id.clone()).collect();
            let preds = classifier::predict(&model, &store, &ids)?;
            let t: Vec<&str> = truth.iter().map(|r| r.class_name.as_str()).collect();
            let p: Vec<&str> = preds.iter().map(|r| model.class_names()[r.predicted].as_str()).collect();
            let cm = evaluation::confusion_matrix_by_name(&t, &p, &project.state.class_names)?;
            if let Some(path) = confusion_csv {
                let mut buf = Vec::new();
                cm.write_csv(&mut buf)?;
                project::write_atomic(&path, &buf)?;
            }
            let report = evaluation::metrics(&cm);
            let flagged = evaluation::per_class_flags(&report, flag_threshold);
            print_json(&serde_json::json!({ "report": report, "flagged": flagged }))
        }
        Command::ExportCurve { out } => {
            let state = project::load_project(dir)?;
            write_output(out.as_deref(), state.curve().to_csv().as_bytes())
        }
        Command::ExportLabels { out } => {
            let project = Project::open(dir)?;
            let crops = project.crops()?;
            let mut buf = Vec::new();
            project::export_labels_csv(&project.state, crops.as_deref(), &mut buf)?;
            write_output(out.as_deref(), &buf)
        }
        Command::ImportLabels { file } => {
            let _lock = lock(dir)?;
            let mut state = project::load_project(dir)?;
            let applied = project::import_labels_csv(fs::File::open(file)?, &mut state)?;
            project::save_project(dir, &state)?;
            print_json(&serde_json::json!({ "applied": applied.len() }))
        }
        Command::Serve { port, host } => {
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(crate::api::serve(dir, SocketAddr::new(host, port)))
        }
    }
}

fn print_session(project: &Project) -> Result<(), CliError> {
    print_json(&crate::api::SessionView::new(
        &project.state,
        crate::api::TrainingStatus::Idle,
    ))
}
