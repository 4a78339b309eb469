use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{AcquisitionMode, CountMode, DataSource, ExperimentConfig};
use super::metrics::{IterationMetrics, MetricsLog, UncertaintySummary};
use super::train::{accuracy, eeg_reliability, score_entropy, train_iteration};
use crate::data::{generate, ingest, split, split_from_tags, Dataset};
use crate::gradcore::AdamState;
use crate::model::{ModelConfig, ModelParams};
use crate::oracle::{
    Attachment, FeatureSummary, ModalitySummary, Oracle, OracleKind, QueryRequest, RemoteOracle, RunPhase,
    RunStatus, SimulatedOracle,
};
use crate::pool::{select_top_k, top_fraction_count, SamplePool};
use crate::seeding::{self, Stream};
use crate::{ClassLabel, Error, Result, SampleId};

const STATE_FORMAT: &str = "cmal-run-state";
const STATE_VERSION: u32 = 1;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const RUN_STATE: &str = "run_state.json";
pub const INVARIANT_DUMP: &str = "invariant_dump.json";

/// Builds the dataset and initial partition described by `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, SamplePool)> {
    let dataset = match &cfg.data {
        DataSource::Synthetic(s) => generate(s)?.dataset,
        DataSource::File(f) => ingest(&f.path, f.labels)?,
    };
    let pool = match &cfg.data {
        DataSource::File(f) if f.use_split_column => split_from_tags(&dataset)?,
        _ => split(&dataset, cfg.split.fractions, cfg.split.seed)?,
    };
    Ok((dataset, pool))
}

fn model_config(cfg: &ExperimentConfig, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        eeg_input_dim: dataset.d_eeg(),
        face_input_dim: dataset.d_face(),
        hidden: cfg.model.hidden.clone(),
        embedding_dim: cfg.model.embedding_dim,
        classes: dataset.classes(),
    }
}

/// A query batch waiting for its labels, together with the metrics entry of
/// the iteration that issued it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingAcquisition {
    pub entry: IterationMetrics,
    pub requests: Vec<QueryRequest>,
    pub labels: BTreeMap<SampleId, ClassLabel>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub config: ExperimentConfig,
    pub iteration: usize,
    pub finished: bool,
    pub pool: SamplePool,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub metrics: MetricsLog,
    pub pending: Option<PendingAcquisition>,
    /// Wall-clock seconds per completed iteration; kept out of the metrics log
    /// so that log stays reproducible.
    pub timings: Vec<f64>,
}

impl RunState {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let state: RunState = serde_json::from_str(&text)?;
        if state.format != STATE_FORMAT || state.version != STATE_VERSION {
            return Err(Error::State(format!(
                "{} is not a version {STATE_VERSION} run-state file",
                path.display()
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// One iteration completed and another follows.
    Continue,
    /// The remote oracle timed out; the run state holds the open batch.
    Paused,
    /// The budget is reached or acquisition is disabled.
    Finished,
}

pub struct Experiment {
    config: ExperimentConfig,
    dataset: Dataset,
    state: RunState,
    oracle: Box<dyn Oracle + Send>,
    attachment: Option<Arc<Attachment>>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("iteration", &self.state.iteration)
            .field("finished", &self.state.finished)
            .finish_non_exhaustive()
    }
}

impl Experiment {
    /// Starts a fresh run. A remote oracle needs `attachment`.
    pub fn new(config: ExperimentConfig, attachment: Option<Arc<Attachment>>) -> Result<Self> {
        config.validate()?;
        let (dataset, pool) = load_data(&config)?;
        let mcfg = model_config(&config, &dataset);
        let params = ModelParams::init(mcfg, config.model.seed)?;
        let optimizer = AdamState::new(config.optimizer, params.tensors());
        let metrics = MetricsLog {
            config_hash: config.hash(),
            seed: config.split.seed,
            mode: config.acquisition.mode,
            warm_start: config.training.warm_start,
            weights: config.objective.weights,
            classes: dataset.classes(),
            universe: pool.universe(),
            budgets: config.acquisition.budgets.clone(),
            entries: Vec::new(),
        };
        let state = RunState {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            config_hash: config.hash(),
            data_fingerprint: dataset.fingerprint(),
            config: config.clone(),
            iteration: 0,
            finished: false,
            pool,
            params,
            optimizer,
            metrics,
            pending: None,
            timings: Vec::new(),
        };
        Self::assemble(config, dataset, state, attachment)
    }

    /// Continues from a saved state. `config`, when given, must hash to the
    /// value recorded in the state.
    pub fn from_state(
        state: RunState,
        config: Option<ExperimentConfig>,
        attachment: Option<Arc<Attachment>>,
    ) -> Result<Self> {
        let mut config = config.unwrap_or_else(|| state.config.clone());
        if config.hash() != state.config_hash {
            return Err(Error::Config(format!(
                "config hash {} does not match the run state ({}); refusing to resume",
                config.hash(),
                state.config_hash
            )));
        }
        if config.output_dir.is_none() {
            config.output_dir = state.config.output_dir.clone();
        }
        config.validate()?;
        let (dataset, _) = load_data(&config)?;
        if dataset.fingerprint() != state.data_fingerprint {
            return Err(Error::State("data source changed since the run started".into()));
        }
        state.pool.check()?;
        let params = ModelParams::from_named(
            state.params.config().clone(),
            state.params.named().map(|(n, t)| (n, t.clone())).collect(),
        )?;
        let state = RunState { params, ..state };
        Self::assemble(config, dataset, state, attachment)
    }

    fn assemble(
        config: ExperimentConfig,
        dataset: Dataset,
        state: RunState,
        attachment: Option<Arc<Attachment>>,
    ) -> Result<Self> {
        let oracle: Box<dyn Oracle + Send> = match config.oracle.kind {
            OracleKind::Simulated => Box::new(SimulatedOracle::new(
                dataset.labels(),
                dataset.classes(),
                config.oracle.noise_rate,
                config.oracle.seed,
            )?),
            OracleKind::Remote => {
                let att = attachment.clone().ok_or_else(|| {
                    Error::Config("a remote oracle needs the annotation service (use `cmal serve`)".into())
                })?;
                let timeout = config.oracle.timeout_secs.map(Duration::from_secs_f64);
                Box::new(RemoteOracle::new(att, timeout))
            }
        };
        let exp = Self {
            config,
            dataset,
            state,
            oracle,
            attachment,
        };
        exp.publish(if exp.state.finished {
            RunPhase::Finished
        } else {
            RunPhase::Starting
        });
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn pool(&self) -> &SamplePool {
        &self.state.pool
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.state.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Test ids in ascending order.
    pub fn test_ids(&self) -> Vec<SampleId> {
        self.state.pool.test().iter().copied().collect()
    }

    /// Labeled-pool size at which acquisition stops.
    pub fn final_target(&self) -> usize {
        let pool = &self.state.pool;
        self.state
            .metrics
            .budget_target(self.config.acquisition.final_budget(), pool.labeled_len() + pool.unlabeled_len())
    }

    /// Runs until the budget is reached or the remote oracle times out.
    pub fn run(&mut self) -> Result<StepOutcome> {
        loop {
            match self.step()? {
                StepOutcome::Continue => continue,
                done => return Ok(done),
            }
        }
    }

    /// Completes one iteration (or the open acquisition of a paused one).
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.state.finished {
            return Ok(StepOutcome::Finished);
        }
        let started = Instant::now();
        let outcome = match self.state.pending.take() {
            Some(pending) => self.complete_acquisition(pending)?,
            None => self.train_and_score()?,
        };
        if outcome != StepOutcome::Paused {
            self.state.timings.push(started.elapsed().as_secs_f64());
        }
        self.publish(match outcome {
            StepOutcome::Continue => RunPhase::Training,
            StepOutcome::Paused => RunPhase::Paused,
            StepOutcome::Finished => RunPhase::Finished,
        });
        self.save_progress()?;
        Ok(outcome)
    }

    fn train_and_score(&mut self) -> Result<StepOutcome> {
        let iteration = self.state.iteration;
        self.publish(RunPhase::Training);
        let unlabeled: Vec<SampleId> = self.state.pool.unlabeled().iter().copied().collect();
        let classes = self.dataset.classes();

        let (_, before) = score_entropy(&self.state.params, &self.dataset, &unlabeled)?;
        let uncertainty_before = UncertaintySummary::from_scores(&before, classes);

        if iteration > 0 && !self.config.training.warm_start {
            self.state.params = ModelParams::init(self.state.params.config().clone(), self.config.model.seed)?;
            self.state.optimizer = AdamState::new(self.config.optimizer, self.state.params.tensors());
        }
        let losses = train_iteration(
            &mut self.state.params,
            &mut self.state.optimizer,
            &self.dataset,
            &self.state.pool,
            &self.config.objective,
            &self.config.training,
            iteration,
        )?;
        let test_accuracy = accuracy(&self.state.params, &self.dataset, &self.test_ids())?;
        let (probs, scores) = score_entropy(&self.state.params, &self.dataset, &unlabeled)?;
        let uncertainty = UncertaintySummary::from_scores(&scores, classes);
        if let Some(u) = &uncertainty {
            let total: u64 = u.histogram.iter().sum();
            if total as usize != unlabeled.len() {
                return self.abort(format!("histogram holds {total} samples, pool has {}", unlabeled.len()));
            }
        }
        let entry = IterationMetrics {
            iteration,
            labeled: self.state.pool.labeled_len(),
            unlabeled: self.state.pool.unlabeled_len(),
            labeled_fraction: self.state.pool.labeled_fraction(),
            test_accuracy,
            losses,
            uncertainty_before,
            uncertainty,
            acquired: Vec::new(),
            noisy_answers: 0,
        };

        let k = self.query_count();
        if k == 0 {
            self.state.metrics.entries.push(entry);
            self.state.finished = true;
            return Ok(StepOutcome::Finished);
        }
        let chosen = self.choose(&unlabeled, &scores, k)?;
        let position: BTreeMap<SampleId, usize> = unlabeled.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let requests = chosen
            .iter()
            .map(|id| {
                let row = position[id];
                let rec = self.dataset.record(*id);
                QueryRequest {
                    sample_id: *id,
                    probabilities: probs.row(row).to_vec(),
                    uncertainty: scores[row],
                    summary: FeatureSummary {
                        eeg: ModalitySummary::of(&rec.x_eeg),
                        face: ModalitySummary::of(&rec.x_face),
                    },
                }
            })
            .collect();
        self.complete_acquisition(PendingAcquisition {
            entry,
            requests,
            labels: BTreeMap::new(),
        })
    }

    /// Number of samples to query after the current iteration.
    fn query_count(&self) -> usize {
        let acq = &self.config.acquisition;
        if acq.mode == AcquisitionMode::None {
            return 0;
        }
        let pool = &self.state.pool;
        let remaining = self.final_target().saturating_sub(pool.labeled_len());
        let per_iteration = match acq.count_mode {
            CountMode::Fixed => top_fraction_count(pool.universe(), acq.ratio_percent / 100.0),
            CountMode::Fraction => top_fraction_count(pool.unlabeled_len(), acq.ratio_percent / 100.0),
        };
        per_iteration.max(1).min(remaining).min(pool.unlabeled_len())
    }

    fn choose(&self, unlabeled: &[SampleId], scores: &[f64], k: usize) -> Result<Vec<SampleId>> {
        let acq = &self.config.acquisition;
        match acq.mode {
            AcquisitionMode::Entropy => {
                let weighted: Vec<f64> = if acq.reliability_weighted {
                    let rel = eeg_reliability(&self.state.params, &self.dataset, unlabeled)?;
                    scores.iter().zip(rel).map(|(s, r)| s * (1.0 - r)).collect()
                } else {
                    scores.to_vec()
                };
                let scored: Vec<(SampleId, f64)> = unlabeled.iter().copied().zip(weighted).collect();
                Ok(select_top_k(&scored, k, acq.ratio_percent / 100.0)?.ids())
            }
            AcquisitionMode::Random => {
                let mut ids = unlabeled.to_vec();
                let mut rng = seeding::rng(acq.seed, Stream::RandomAcquisition, self.state.iteration as u64);
                ids.shuffle(&mut rng);
                ids.truncate(k);
                ids.sort_unstable();
                Ok(ids)
            }
            AcquisitionMode::None => Ok(Vec::new()),
        }
    }

    fn complete_acquisition(&mut self, mut pending: PendingAcquisition) -> Result<StepOutcome> {
        let open: Vec<QueryRequest> = pending
            .requests
            .iter()
            .filter(|r| !pending.labels.contains_key(&r.sample_id))
            .cloned()
            .collect();
        if !open.is_empty() {
            self.publish(RunPhase::AwaitingLabels);
            let answer = self.oracle.annotate(&open)?;
            pending.labels.extend(answer.labels);
            if !answer.unanswered.is_empty() {
                self.state.pending = Some(pending);
                return Ok(StepOutcome::Paused);
            }
        }
        let ids: Vec<SampleId> = pending.requests.iter().map(|r| r.sample_id).collect();
        let labeled_before = self.state.pool.labeled_len();
        self.state.pool.transfer(&ids, &pending.labels)?;
        if let Err(e) = self.state.pool.check() {
            return self.abort(e.to_string());
        }
        if self.state.pool.labeled_len() != labeled_before + ids.len() {
            return self.abort("labeled pool did not grow by the batch size".into());
        }
        let mut entry = pending.entry;
        entry.noisy_answers = ids
            .iter()
            .filter(|id| self.dataset.record(**id).label != Some(pending.labels[id]))
            .count();
        entry.acquired = ids;
        if let Some(prev) = self.state.metrics.entries.last() {
            if entry.labeled_fraction <= prev.labeled_fraction {
                return self.abort(format!(
                    "labeled fraction {} did not increase past {}",
                    entry.labeled_fraction, prev.labeled_fraction
                ));
            }
        }
        self.state.metrics.entries.push(entry);
        self.state.iteration += 1;
        Ok(StepOutcome::Continue)
    }

    /// Dumps the state next to the outputs and fails with an invariant error.
    fn abort<T>(&mut self, message: String) -> Result<T> {
        if let Some(dir) = &self.config.output_dir {
            let _ = fs::create_dir_all(dir).and_then(|_| {
                fs::write(
                    dir.join(INVARIANT_DUMP),
                    serde_json::to_vec(&self.state).unwrap_or_default(),
                )
            });
        }
        self.publish(RunPhase::Failed);
        Err(Error::Invariant(message))
    }

    fn publish(&self, phase: RunPhase) {
        let Some(att) = &self.attachment else {
            return;
        };
        let pool = &self.state.pool;
        att.publish_status(RunStatus {
            phase,
            iteration: self.state.iteration,
            classes: self.dataset.classes(),
            labeled: pool.labeled_len(),
            unlabeled: pool.unlabeled_len(),
            test: pool.test().len(),
            accuracy_history: self
                .state
                .metrics
                .entries
                .iter()
                .map(|e| (e.labeled_fraction, e.test_accuracy))
                .collect(),
            message: None,
        });
        att.publish_metrics(serde_json::to_value(&self.state.metrics).unwrap_or_default());
    }

    fn output_dir(&self) -> Option<&PathBuf> {
        self.config.output_dir.as_ref()
    }

    fn save_progress(&self) -> Result<()> {
        let Some(dir) = self.output_dir() else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        self.state.save(&dir.join(RUN_STATE))?;
        if self.state.finished {
            self.write_outputs(dir)?;
        }
        Ok(())
    }

    /// Writes metrics, timings and the final checkpoint into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_JSON), serde_json::to_vec_pretty(&self.state.metrics)?)?;
        self.state.metrics.write_csv(fs::File::create(dir.join(METRICS_CSV))?)?;
        let mut timings = String::from("iteration,seconds\n");
        for (i, t) in self.state.timings.iter().enumerate() {
            timings.push_str(&format!("{i},{t}\n"));
        }
        fs::write(dir.join(TIMINGS_CSV), timings)?;
        self.state.params.save_checkpoint(&dir.join(CHECKPOINT))?;
        Ok(())
    }
}

/// Runs `cfg` to completion with its simulated oracle.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<(MetricsLog, ModelParams)> {
    let mut exp = Experiment::new(cfg, None)?;
    match exp.run()? {
        StepOutcome::Finished => Ok((exp.state.metrics, exp.state.params)),
        other => Err(Error::State(format!("run stopped early: {other:?}"))),
    }
}
