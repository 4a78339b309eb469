//! Label sources: a simulated annotator with symmetric label noise, and a
//! remote annotator reached through an [`Attachment`] shared with the
//! annotation service.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, Stream};
use crate::{ClassLabel, SampleId};

/// Points in each downsampled feature profile.
pub const PROFILE_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("annotation request is empty")]
    EmptyRequest,
    #[error("no ground truth for sample {0}")]
    MissingTruth(SampleId),
    #[error("noise rate must lie in [0, 1), got {0}")]
    NoiseRate(f64),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Probability that a simulated answer is replaced by a random wrong class.
    pub noise_rate: f64,
    pub seed: u64,
    /// Remote only; `None` waits indefinitely.
    pub timeout_secs: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Simulated,
            noise_rate: 0.0,
            seed: 0,
            timeout_secs: None,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(OracleError::NoiseRate(self.noise_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Chunk means over the feature vector.
    pub profile: Vec<f64>,
}

impl ModalitySummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                min: 0.0,
                mean: 0.0,
                max: 0.0,
                profile: Vec::new(),
            };
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let points = PROFILE_POINTS.min(values.len());
        let profile = (0..points)
            .map(|k| {
                let lo = k * values.len() / points;
                let hi = (k + 1) * values.len() / points;
                values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        Self {
            min,
            mean,
            max,
            profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub eeg: ModalitySummary,
    pub face: ModalitySummary,
}

/// One sample sent for annotation, with the model's current belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub sample_id: SampleId,
    pub probabilities: Vec<f64>,
    pub uncertainty: f64,
    pub summary: FeatureSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub labels: BTreeMap<SampleId, ClassLabel>,
    /// Ids still waiting for an answer when the oracle gave up.
    pub unanswered: Vec<SampleId>,
}

impl Annotation {
    pub fn is_complete(&self) -> bool {
        self.unanswered.is_empty()
    }
}

pub trait Oracle {
    fn annotate(&mut self, queries: &[QueryRequest]) -> Result<Annotation, OracleError>;
}

/// Answers from stored ground truth, each flipped to a uniformly chosen
/// wrong class with probability `noise_rate`. The flip decision for an id
/// depends only on `(seed, id)`.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: BTreeMap<SampleId, ClassLabel>,
    classes: usize,
    noise_rate: f64,
    seed: u64,
}

impl SimulatedOracle {
    pub fn new(
        truth: BTreeMap<SampleId, ClassLabel>,
        classes: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Result<Self, OracleError> {
        if classes < 2 {
            return Err(OracleError::Classes(classes));
        }
        if !(0.0..1.0).contains(&noise_rate) {
            return Err(OracleError::NoiseRate(noise_rate));
        }
        Ok(Self {
            truth,
            classes,
            noise_rate,
            seed,
        })
    }

    pub fn answer(&self, id: SampleId) -> Result<ClassLabel, OracleError> {
        let truth = *self.truth.get(&id).ok_or(OracleError::MissingTruth(id))?;
        let mut rng = seeding::rng(self.seed, Stream::Oracle, id);
        if rng.random::<f64>() < self.noise_rate {
            let other = rng.random_range(0..self.classes - 1);
            Ok(if other >= truth { other + 1 } else { other })
        } else {
            Ok(truth)
        }
    }
}

impl Oracle for SimulatedOracle {
    fn annotate(&mut self, queries: &[QueryRequest]) -> Result<Annotation, OracleError> {
        if queries.is_empty() {
            return Err(OracleError::EmptyRequest);
        }
        let labels = queries
            .iter()
            .map(|q| Ok((q.sample_id, self.answer(q.sample_id)?)))
            .collect::<Result<_, OracleError>>()?;
        Ok(Annotation {
            labels,
            unanswered: Vec::new(),
        })
    }
}

pub type QueryId = u64;

/// A query waiting for a human label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: QueryId,
    pub sample_id: SampleId,
    pub probabilities: Vec<f64>,
    pub uncertainty: f64,
    pub summary: FeatureSummary,
    pub created_at_ms: u64,
}

/// Record of one human submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub query_id: QueryId,
    pub sample_id: SampleId,
    pub label: ClassLabel,
    pub submitted_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Starting,
    Training,
    AwaitingLabels,
    Paused,
    Finished,
    Failed,
}

/// Read-only progress view published by the runner at iteration boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub phase: RunPhase,
    pub iteration: usize,
    pub classes: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// `(labeled fraction, test accuracy)` per completed iteration.
    pub accuracy_history: Vec<(f64, f64)>,
    pub message: Option<String>,
}

impl RunStatus {
    pub fn starting(classes: usize) -> Self {
        Self {
            phase: RunPhase::Starting,
            iteration: 0,
            classes,
            labeled: 0,
            unlabeled: 0,
            test: 0,
            accuracy_history: Vec::new(),
            message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubmitOutcome {
    Accepted(AuditRow),
    /// Same label submitted again; nothing changes.
    Duplicate(AuditRow),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubmitError {
    #[error("unknown query {0}")]
    UnknownQuery(QueryId),
    #[error("query {query_id} already labeled {existing}")]
    Conflict { query_id: QueryId, existing: ClassLabel },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: ClassLabel, classes: usize },
}

#[derive(Debug)]
struct AttachState {
    status: RunStatus,
    metrics: serde_json::Value,
    next_query_id: QueryId,
    /// Published and not yet answered, keyed by query id.
    pending: BTreeMap<QueryId, PendingQuery>,
    /// Every query id ever published, with its sample.
    issued: BTreeMap<QueryId, SampleId>,
    answers: BTreeMap<QueryId, AuditRow>,
    /// Accepted submissions not yet consumed by the runner.
    commands: VecDeque<QueryId>,
    audit: Vec<AuditRow>,
}

/// State shared between the runner thread and the annotation service.
///
/// The service only reads snapshots and enqueues label commands; the
/// runner alone consumes commands and moves samples between pools.
#[derive(Debug)]
pub struct Attachment {
    state: Mutex<AttachState>,
    changed: Condvar,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Attachment {
    pub fn new(classes: usize) -> Self {
        Self {
            state: Mutex::new(AttachState {
                status: RunStatus::starting(classes),
                metrics: serde_json::Value::Null,
                next_query_id: 1,
                pending: BTreeMap::new(),
                issued: BTreeMap::new(),
                answers: BTreeMap::new(),
                commands: VecDeque::new(),
                audit: Vec::new(),
            }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, AttachState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn publish_status(&self, status: RunStatus) {
        self.lock().status = status;
        self.changed.notify_all();
    }

    pub fn publish_metrics(&self, metrics: serde_json::Value) {
        self.lock().metrics = metrics;
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status.clone()
    }

    pub fn metrics(&self) -> serde_json::Value {
        self.lock().metrics.clone()
    }

    pub fn pending(&self) -> Vec<PendingQuery> {
        self.lock().pending.values().cloned().collect()
    }

    pub fn next_pending(&self) -> Option<PendingQuery> {
        self.lock().pending.values().next().cloned()
    }

    pub fn audit(&self) -> Vec<AuditRow> {
        self.lock().audit.clone()
    }

    /// Records a human label for `query_id`.
    pub fn submit(&self, query_id: QueryId, label: ClassLabel) -> Result<SubmitOutcome, SubmitError> {
        let mut st = self.lock();
        let Some(&sample_id) = st.issued.get(&query_id) else {
            return Err(SubmitError::UnknownQuery(query_id));
        };
        if let Some(existing) = st.answers.get(&query_id) {
            return if existing.label == label {
                Ok(SubmitOutcome::Duplicate(existing.clone()))
            } else {
                Err(SubmitError::Conflict {
                    query_id,
                    existing: existing.label,
                })
            };
        }
        let classes = st.status.classes;
        if label >= classes {
            return Err(SubmitError::LabelOutOfRange { label, classes });
        }
        let row = AuditRow {
            query_id,
            sample_id,
            label,
            submitted_at_ms: now_ms(),
        };
        st.pending.remove(&query_id);
        st.answers.insert(query_id, row.clone());
        st.audit.push(row.clone());
        st.commands.push_back(query_id);
        drop(st);
        self.changed.notify_all();
        Ok(SubmitOutcome::Accepted(row))
    }

    /// Publishes queries, reusing the open query for a sample that already has one.
    fn publish_queries(&self, requests: &[QueryRequest]) -> BTreeMap<SampleId, QueryId> {
        let mut st = self.lock();
        let mut open: BTreeMap<SampleId, QueryId> = st
            .issued
            .iter()
            .filter(|(q, _)| st.pending.contains_key(q) || st.commands.contains(q))
            .map(|(q, s)| (*s, *q))
            .collect();
        let mut out = BTreeMap::new();
        for req in requests {
            let query_id = match open.get(&req.sample_id) {
                Some(&q) => q,
                None => {
                    let q = st.next_query_id;
                    st.next_query_id += 1;
                    st.issued.insert(q, req.sample_id);
                    st.pending.insert(
                        q,
                        PendingQuery {
                            query_id: q,
                            sample_id: req.sample_id,
                            probabilities: req.probabilities.clone(),
                            uncertainty: req.uncertainty,
                            summary: req.summary.clone(),
                            created_at_ms: now_ms(),
                        },
                    );
                    open.insert(req.sample_id, q);
                    q
                }
            };
            out.insert(req.sample_id, query_id);
        }
        drop(st);
        self.changed.notify_all();
        out
    }

    /// Blocks until every query in `wanted` has a label or `timeout` passes,
    /// consuming the matching label commands.
    fn collect(&self, wanted: &BTreeMap<SampleId, QueryId>, timeout: Option<Duration>) -> Annotation {
        let deadline = timeout.map(|t| Instant::now() + t);
        let wanted_queries: BTreeSet<QueryId> = wanted.values().copied().collect();
        let mut labels = BTreeMap::new();
        let mut st = self.lock();
        loop {
            let mut keep = VecDeque::new();
            while let Some(q) = st.commands.pop_front() {
                if wanted_queries.contains(&q) {
                    let row = &st.answers[&q];
                    labels.insert(row.sample_id, row.label);
                } else {
                    keep.push_back(q);
                }
            }
            st.commands = keep;
            if labels.len() == wanted.len() {
                break;
            }
            match deadline {
                None => st = self.changed.wait(st).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    st = self
                        .changed
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
        let unanswered = wanted
            .keys()
            .filter(|s| !labels.contains_key(s))
            .copied()
            .collect();
        Annotation { labels, unanswered }
    }
}

/// Oracle backed by human submissions arriving through an [`Attachment`].
#[derive(Debug, Clone)]
pub struct RemoteOracle {
    attachment: std::sync::Arc<Attachment>,
    timeout: Option<Duration>,
}

impl RemoteOracle {
    pub fn new(attachment: std::sync::Arc<Attachment>, timeout: Option<Duration>) -> Self {
        Self {
            attachment,
            timeout,
        }
    }
}

impl Oracle for RemoteOracle {
    fn annotate(&mut self, queries: &[QueryRequest]) -> Result<Annotation, OracleError> {
        if queries.is_empty() {
            return Err(OracleError::EmptyRequest);
        }
        let wanted = self.attachment.publish_queries(queries);
        Ok(self.attachment.collect(&wanted, self.timeout))
    }
}
