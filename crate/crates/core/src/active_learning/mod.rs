//! Pool-based active learning.
//!
//! Each round retrains the head from scratch on every label collected so
//! far, evaluates it on a fixed validation split, scores the unlabeled pool
//! and asks for the next batch. [`simulate`] drives the same loop with an
//! oracle answering every query.

pub mod synthetic;

pub use synthetic::{
    benchmark_config, benchmark_data, benchmark_spec, generate_synthetic_pool, stratified_split, table1_scaled_counts,
    SyntheticItem, SyntheticPool, SyntheticSpec, TABLE1_GROUPINGS,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, class_weights_for_present, ClassifierError, HeadModel, LabeledExample, PredictionRecord,
    TrainConfig, TrainHistory,
};
use crate::embedding::EmbeddingStore;
use crate::evaluation::{self, ConfusionMatrix, MetricsReport};

pub const DEFAULT_BATCH_SIZE_QUERY: usize = 25;
pub const DEFAULT_SEED_PER_CLASS: usize = 2;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const CURVE_HEADER: &str = "labels_used,accuracy,macro_precision,macro_recall,macro_f1";

#[derive(Error, Debug)]
pub enum ActiveLearningError {
    #[error("labeled set is empty; label a seed set first")]
    NoLabels,
    #[error("query batch size must be >= 1")]
    ZeroBatch,
    #[error("rejected labels: {}", format_problems(.0))]
    InvalidLabels(Vec<LabelProblem>),
    #[error("crop {0} has no features")]
    MissingFeatures(String),
    #[error("validation split overlaps the pool: {}", .0.join(", "))]
    ValidationOverlap(Vec<String>),
    #[error("pool item {0} has no oracle label")]
    MissingOracle(String),
    #[error("labeled and unlabeled sets share ids: {}", .0.join(", "))]
    NotDisjoint(Vec<String>),
    #[error("invalid synthetic pool: {0}")]
    InvalidSynthetic(String),
    #[error("curve points must have strictly increasing labels_used ({prev} then {next})")]
    NonIncreasingCurve { prev: usize, next: usize },
    #[error("unknown strategy {0:?} (expected least_confidence, margin, entropy or random)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Evaluation(#[from] evaluation::EvaluationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_problems(problems: &[LabelProblem]) -> String {
    problems
        .iter()
        .map(|p| format!("{}: {}", p.crop_id, p.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelProblem {
    pub crop_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LeastConfidence,
    Margin,
    Entropy,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LeastConfidence,
        Strategy::Margin,
        Strategy::Entropy,
        Strategy::Random,
    ];

    /// Uncertainty score for `p`. Random selection ignores scores for
    /// choosing but still records entropy for the audit trail.
    pub fn score(self, p: &[f64]) -> f64 {
        match self {
            Strategy::LeastConfidence => score_least_confidence(p),
            Strategy::Margin => score_margin(p),
            Strategy::Entropy | Strategy::Random => score_entropy(p),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ActiveLearningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "least_confidence" => Ok(Strategy::LeastConfidence),
            "margin" => Ok(Strategy::Margin),
            "entropy" => Ok(Strategy::Entropy),
            "random" => Ok(Strategy::Random),
            _ => Err(ActiveLearningError::UnknownStrategy(s.to_string())),
        }
    }
}

/// `1 - max_k p_k`.
pub fn score_least_confidence(p: &[f64]) -> f64 {
    1.0 - p.iter().copied().fold(0.0, f64::max)
}

/// `1 - (p(1) - p(2))` over the two largest probabilities.
pub fn score_margin(p: &[f64]) -> f64 {
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    1.0 - (first - second)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn score_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Labeled/unlabeled partition of the pool plus loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    /// crop id → class name.
    pub labeled: BTreeMap<String, String>,
    pub unlabeled: Vec<String>,
    pub round: usize,
    pub label_budget: usize,
    pub strategy: Strategy,
    pub batch_size_query: usize,
    pub seed: u64,
}

impl PoolState {
    pub fn new(
        unlabeled: Vec<String>,
        label_budget: usize,
        strategy: Strategy,
        batch_size_query: usize,
        seed: u64,
    ) -> Result<Self, ActiveLearningError> {
        if batch_size_query == 0 {
            return Err(ActiveLearningError::ZeroBatch);
        }
        Ok(PoolState {
            labeled: BTreeMap::new(),
            unlabeled,
            round: 0,
            label_budget,
            strategy,
            batch_size_query,
            seed,
        })
    }

    pub fn labels_used(&self) -> usize {
        self.labeled.len()
    }

    pub fn pool_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn budget_exhausted(&self) -> bool {
        self.labels_used() >= self.label_budget
    }

    pub fn is_complete(&self) -> bool {
        self.budget_exhausted() || self.unlabeled.is_empty()
    }

    pub fn check_disjoint(&self) -> Result<(), ActiveLearningError> {
        let overlap: Vec<String> = self
            .unlabeled
            .iter()
            .filter(|id| self.labeled.contains_key(*id))
            .cloned()
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(ActiveLearningError::NotDisjoint(overlap))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub crop_id: String,
    pub score: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub round: usize,
    pub items: Vec<QueryItem>,
}

impl QueryBatch {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.crop_id.as_str())
    }
}

fn by_score_desc(a: &QueryItem, b: &QueryItem) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.crop_id.cmp(&b.crop_id))
}

/// Picks up to `batch_size` candidates.
///
/// Uncertainty strategies take the top scores (ties by ascending id); random
/// samples uniformly without replacement from the id-sorted candidates using
/// `seed`. Either way the batch comes back sorted by descending score.
pub fn select_batch(
    mut candidates: Vec<QueryItem>,
    batch_size: usize,
    strategy: Strategy,
    seed: u64,
    round: usize,
) -> Result<QueryBatch, ActiveLearningError> {
    if batch_size == 0 {
        return Err(ActiveLearningError::ZeroBatch);
    }
    let take = batch_size.min(candidates.len());
    let mut items = match strategy {
        Strategy::Random => {
            candidates.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(round as u64);
            let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), take).into_vec();
            picked.sort_unstable();
            let mut slots: Vec<Option<QueryItem>> = candidates.into_iter().map(Some).collect();
            picked.into_iter().map(|i| slots[i].take().expect("distinct")).collect()
        }
        _ => {
            candidates.sort_by(by_score_desc);
            candidates.truncate(take);
            candidates
        }
    };
    items.sort_by(by_score_desc);
    Ok(QueryBatch { round, items })
}

/// Moves labeled ids out of the unlabeled pool. All-or-nothing: any bad row
/// rejects the whole submission and the state is left untouched.
pub fn apply_labels(
    state: &PoolState,
    labels: &[(String, String)],
    class_names: &[String],
) -> Result<PoolState, ActiveLearningError> {
    let unlabeled: HashSet<&str> = state.unlabeled.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    for (id, class) in labels {
        let problem = |reason: String| LabelProblem {
            crop_id: id.clone(),
            reason,
        };
        if !seen.insert(id.as_str()) {
            problems.push(problem("duplicate id in submission".into()));
        } else if state.labeled.contains_key(id) {
            problems.push(problem("already labeled".into()));
        } else if !unlabeled.contains(id.as_str()) {
            problems.push(problem("not in the unlabeled pool".into()));
        }
        if let Err(reason) = check_class_name(class, class_names) {
            problems.push(problem(reason));
        }
    }
    if !problems.is_empty() {
        return Err(ActiveLearningError::InvalidLabels(problems));
    }
    let mut next = state.clone();
    for (id, class) in labels {
        next.labeled.insert(id.clone(), class.clone());
    }
    next.unlabeled.retain(|id| !seen.contains(id.as_str()));
    Ok(next)
}

/// `Ok` when `class` is one of `class_names`; otherwise a message naming the
/// valid classes, with a hint when only the case differs.
pub fn check_class_name(class: &str, class_names: &[String]) -> Result<(), String> {
    if class_names.iter().any(|c| c == class) {
        return Ok(());
    }
    if let Some(c) = class_names.iter().find(|c| c.eq_ignore_ascii_case(class)) {
        return Err(format!(
            "unknown class {class:?}; class names are case-sensitive, did you mean {c:?}?"
        ));
    }
    Err(format!(
        "unknown class {class:?}; valid classes: {}",
        class_names.join(", ")
    ))
}

/// Features in double precision keyed by crop id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn from_store(store: &EmbeddingStore) -> Self {
        FeatureTable {
            dim: store.dim(),
            rows: store
                .iter()
                .map(|(id, v)| (id.to_string(), v.iter().map(|&x| x as f64).collect()))
                .collect(),
        }
    }

    pub fn insert(&mut self, id: String, features: Vec<f64>) {
        assert_eq!(features.len(), self.dim, "feature dimension");
        self.rows.insert(id, features);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    fn require(&self, id: &str) -> Result<&[f64], ActiveLearningError> {
        self.get(id)
            .ok_or_else(|| ActiveLearningError::MissingFeatures(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub labels_used: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl CurvePoint {
    pub fn from_report(labels_used: usize, report: &MetricsReport) -> Self {
        CurvePoint {
            labels_used,
            accuracy: report.accuracy,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn push(&mut self, point: CurvePoint) -> Result<(), ActiveLearningError> {
        if let Some(last) = self.points.last() {
            if point.labels_used <= last.labels_used {
                return Err(ActiveLearningError::NonIncreasingCurve {
                    prev: last.labels_used,
                    next: point.labels_used,
                });
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.labels_used, p.accuracy, p.macro_precision, p.macro_recall, p.macro_f1
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("Vec write");
        String::from_utf8(buf).expect("ASCII")
    }

    /// First `labels_used` at which macro-F1 reaches `target`.
    pub fn labels_to_reach(&self, target: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.macro_f1 >= target)
            .map(|p| p.labels_used)
    }
}

/// Everything a round needs besides the pool state.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub features: &'a FeatureTable,
    pub class_names: &'a [String],
    /// `(crop_id, class index)`; never queried.
    pub validation: &'a [(String, usize)],
    pub train: &'a TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    /// `round` advanced by one.
    pub state: PoolState,
    pub model: HeadModel,
    pub history: TrainHistory,
    pub point: CurvePoint,
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// `None` once the budget is spent or the pool is empty.
    pub batch: Option<QueryBatch>,
}

impl RoundOutput {
    pub fn is_complete(&self) -> bool {
        self.batch.is_none()
    }
}

/// Training examples from a label map, in ascending crop-id order.
pub fn labeled_examples(
    labeled: &BTreeMap<String, String>,
    features: &FeatureTable,
    class_names: &[String],
) -> Result<Vec<LabeledExample>, ActiveLearningError> {
    labeled
        .iter()
        .map(|(id, class)| {
            let label = class_names.iter().position(|c| c == class).ok_or_else(|| {
                ActiveLearningError::InvalidLabels(vec![LabelProblem {
                    crop_id: id.clone(),
                    reason: format!("unknown class {class:?}"),
                }])
            })?;
            Ok(LabeledExample::new(features.require(id)?.to_vec(), label))
        })
        .collect()
}

/// Trains a fresh zero-initialized head on `examples`.
pub fn train_from_scratch(
    examples: &[LabeledExample],
    class_names: &[String],
    dim: usize,
    config: &TrainConfig,
) -> Result<(HeadModel, TrainHistory), ActiveLearningError> {
    let mut counts = vec![0usize; class_names.len()];
    for ex in examples {
        counts[ex.label] += 1;
    }
    let weights = class_weights_for_present(&counts, config.weight_mode, config.weight_cap);
    let init = HeadModel::zeros(class_names.to_vec(), dim)?;
    Ok(classifier::train(&init, examples, config, &weights)?)
}

/// Confusion matrix and metrics of `model` on `(id, class)` pairs.
pub fn evaluate_model(
    model: &HeadModel,
    features: &FeatureTable,
    labeled: &[(String, usize)],
) -> Result<(ConfusionMatrix, MetricsReport), ActiveLearningError> {
    let mut truths = Vec::with_capacity(labeled.len());
    let mut preds = Vec::with_capacity(labeled.len());
    for (id, label) in labeled {
        let rec = PredictionRecord::from_features(model, id, features.require(id)?)?;
        truths.push(*label);
        preds.push(rec.predicted);
    }
    let cm = evaluation::confusion_matrix(&truths, &preds, model.class_names())?;
    let report = evaluation::metrics(&cm);
    Ok((cm, report))
}

/// One retrain → evaluate → score → query cycle.
pub fn run_round(state: &PoolState, ctx: &RoundContext<'_>) -> Result<RoundOutput, ActiveLearningError> {
    if state.labeled.is_empty() {
        return Err(ActiveLearningError::NoLabels);
    }
    if state.batch_size_query == 0 {
        return Err(ActiveLearningError::ZeroBatch);
    }
    let examples = labeled_examples(&state.labeled, ctx.features, ctx.class_names)?;
    let (model, history) = train_from_scratch(&examples, ctx.class_names, ctx.features.dim(), ctx.train)?;
    let (confusion, report) = evaluate_model(&model, ctx.features, ctx.validation)?;
    let point = CurvePoint::from_report(state.labels_used(), &report);

    let mut next = state.clone();
    next.round += 1;
    let batch = if state.is_complete() {
        None
    } else {
        let candidates = state
            .unlabeled
            .iter()
            .map(|id| {
                let rec = PredictionRecord::from_features(&model, id, ctx.features.require(id)?)?;
                Ok(QueryItem {
                    crop_id: id.clone(),
                    score: state.strategy.score(&rec.probs),
                    probs: rec.probs,
                })
            })
            .collect::<Result<Vec<_>, ActiveLearningError>>()?;
        let room = state.label_budget - state.labels_used();
        Some(select_batch(
            candidates,
            state.batch_size_query.min(room),
            state.strategy,
            state.seed,
            next.round,
        )?)
    };
    Ok(RoundOutput {
        state: next,
        model,
        history,
        point,
        report,
        confusion,
        batch,
    })
}

/// Stratified seed set: up to `per_class` random ids from each class
/// (all of them when a class has fewer). Returned sorted.
pub fn stratified_seed_set(
    pool_labels: &BTreeMap<String, usize>,
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Vec<String> {
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); num_classes];
    for (id, &label) in pool_labels {
        by_class[label].push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = by_class
        .iter()
        .flat_map(|ids| {
            let take = per_class.min(ids.len());
            index::sample(&mut rng, ids.len(), take)
                .into_iter()
                .map(|i| ids[i].to_string())
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort();
    out
}

/// Uniform seed set for live projects, where classes are unknown up front.
pub fn random_seed_set(pool: &[String], size: usize, seed: u64) -> Vec<String> {
    let mut sorted: Vec<&String> = pool.iter().collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = index::sample(&mut rng, sorted.len(), size.min(sorted.len()))
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect();
    out.sort();
    out
}

/// A pool with hidden oracle labels and a disjoint validation split.
#[derive(Debug, Clone)]
pub struct SimulationData {
    pub class_names: Vec<String>,
    pub features: FeatureTable,
    /// crop id → class index; the whole pool.
    pub pool: BTreeMap<String, usize>,
    pub validation: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub strategy: Strategy,
    pub batch_size_query: usize,
    pub label_budget: usize,
    pub seed: u64,
    pub seed_per_class: usize,
    pub train: TrainConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            strategy: Strategy::Entropy,
            batch_size_query: DEFAULT_BATCH_SIZE_QUERY,
            label_budget: usize::MAX,
            seed: 0,
            seed_per_class: DEFAULT_SEED_PER_CLASS,
            train: TrainConfig::default(),
        }
    }
}

/// Per-round audit entry: the emitted batch (if any) and the curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    pub strategy: Strategy,
    pub point: CurvePoint,
    pub batch: Option<QueryBatch>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub curve: LearningCurve,
    pub rounds: Vec<RoundAudit>,
    pub final_model: HeadModel,
    pub final_state: PoolState,
}

/// Runs the loop to completion, answering every query from the oracle.
pub fn simulate(
    data: &SimulationData,
    config: &SimulationConfig,
) -> Result<SimulationOutcome, ActiveLearningError> {
    let overlap: Vec<String> = data
        .validation
        .iter()
        .filter(|(id, _)| data.pool.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(ActiveLearningError::ValidationOverlap(overlap));
    }

    let seed_ids = stratified_seed_set(
        &data.pool,
        data.class_names.len(),
        config.seed_per_class,
        config.seed,
    );
    let mut state = PoolState::new(
        data.pool.keys().cloned().collect(),
        config.label_budget,
        config.strategy,
        config.batch_size_query,
        config.seed,
    )?;
    state = apply_labels(&state, &oracle_answers(data, seed_ids.iter())?, &data.class_names)?;

    let ctx = RoundContext {
        features: &data.features,
        class_names: &data.class_names,
        validation: &data.validation,
        train: &config.train,
    };
    let mut curve = LearningCurve::default();
    let mut rounds = Vec::new();
    loop {
        let out = run_round(&state, &ctx)?;
        curve.push(out.point)?;
        rounds.push(RoundAudit {
            round: out.state.round,
            strategy: config.strategy,
            point: out.point,
            batch: out.batch.clone(),
        });
        match out.batch {
            None => {
                return Ok(SimulationOutcome {
                    curve,
                    rounds,
                    final_model: out.model,
                    final_state: out.state,
                })
            }
            Some(batch) => {
                let answers = oracle_answers(data, batch.ids())?;
                state = apply_labels(&out.state, &answers, &data.class_names)?;
            }
        }
    }
}

fn oracle_answers<S: AsRef<str>>(
    data: &SimulationData,
    ids: impl IntoIterator<Item = S>,
) -> Result<Vec<(String, String)>, ActiveLearningError> {
    ids.into_iter()
        .map(|id| {
            let id = id.as_ref();
            let label = data
                .pool
                .get(id)
                .ok_or_else(|| ActiveLearningError::MissingOracle(id.to_string()))?;
            Ok((id.to_string(), data.class_names[*label].clone()))
        })
        .collect()
}
