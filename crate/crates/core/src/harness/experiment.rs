//! The task-by-task experiment loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, ModelState};
use super::config::{RunConfig, StreamSource};
use super::metrics::{self, StepPredictions, StrategyMetrics};
use super::stream::{self, EvalStream, TaskStream};
use crate::encoders::{AdapterParams, LabeledEmbeddings};
use crate::error::{CilError, Result};
use crate::inference::{BranchScorer, PredictionTrace, Strategy};
use crate::memory::DistributionStore;
use crate::mop::MoPParams;
use crate::training::{self, EpochRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    /// `synthetic` or the file path.
    pub source: String,
    /// CRC32 of the stream file (or of its encoding, for synthetic streams).
    pub checksum: String,
    pub num_tasks: usize,
    pub dim: usize,
    /// Class ids of each task, as assigned.
    pub class_order: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    /// Reads of a training split outside its own task.
    pub old_task_reads: usize,
    /// Training splits released after their task's statistics were captured.
    pub splits_released: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub config: RunConfig,
    pub stream: StreamInfo,
    pub status: RunStatus,
    pub completed_tasks: usize,
    /// One entry per configured strategy, in configured order.
    pub strategies: Vec<StrategyMetrics>,
    pub audit: AuditSummary,
}

impl MetricsReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyMetrics> {
        self.strategies.iter().find(|m| m.strategy == s)
    }

    /// Metrics of the first configured strategy.
    pub fn headline(&self) -> &StrategyMetrics {
        &self.strategies[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct RunArtifacts {
    pub report: MetricsReport,
    pub training_log: Vec<EpochRecord>,
    pub state: ModelState,
}

#[derive(Debug)]
pub struct RunFailure {
    pub error: CilError,
    /// Metrics for the steps that completed before the error.
    pub partial: Option<MetricsReport>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl From<CilError> for Box<RunFailure> {
    fn from(error: CilError) -> Self {
        Box::new(RunFailure { error, partial: None })
    }
}

/// Receives every evaluated sample.
pub trait TraceSink {
    fn record(&mut self, step: usize, sample: &SampleRef, trace: &PredictionTrace) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SampleRef {
    /// Task the sample's class belongs to.
    pub task: usize,
    /// Row in that task's test split.
    pub index: usize,
    pub label: u32,
}

/// Hands each task's training split out exactly once, and only while that
/// task is current. Splits are dropped as soon as the caller is done with
/// them, so no raw training data outlives its task.
pub struct TrainVault {
    splits: Vec<Option<LabeledEmbeddings>>,
    current: Option<usize>,
    audit: AuditSummary,
}

impl TrainVault {
    pub fn new(splits: Vec<LabeledEmbeddings>) -> Self {
        Self { splits: splits.into_iter().map(Some).collect(), current: None, audit: AuditSummary::default() }
    }

    pub fn begin_task(&mut self, t: usize) {
        for (k, slot) in self.splits.iter_mut().enumerate().take(t) {
            if slot.take().is_some() {
                self.audit.violations.push(format!("training split of task {k} was still held when task {t} began"));
            }
        }
        self.current = Some(t);
    }

    pub fn take(&mut self, t: usize) -> Result<LabeledEmbeddings> {
        if self.current != Some(t) {
            self.audit.old_task_reads += 1;
            self.audit.violations.push(format!("training split of task {t} requested during task {:?}", self.current));
        }
        self.splits
            .get_mut(t)
            .and_then(Option::take)
            .ok_or_else(|| CilError::InvalidArgument(format!("training split of task {t} is no longer available")))
    }

    pub fn release(&mut self, split: LabeledEmbeddings) {
        drop(split);
        self.audit.splits_released += 1;
    }

    /// Raw splits still held for tasks before the current one.
    pub fn held_before_current(&self) -> usize {
        let cur = self.current.unwrap_or(0);
        self.splits[..cur].iter().filter(|s| s.is_some()).count()
    }

    pub fn audit(&self) -> &AuditSummary {
        &self.audit
    }
}

/// Builds the stream named by the config.
pub fn build_stream(config: &RunConfig) -> Result<(TaskStream, StreamInfo)> {
    let (stream, source, crc) = match &config.stream {
        StreamSource::Synthetic(spec) => {
            let s = stream::synth_stream(spec, config.train.seed)?;
            let bytes = stream::encode_stream(&s)?;
            let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("trailer"));
            (s, "synthetic".to_string(), crc)
        }
        StreamSource::File { path } => {
            let loaded = stream::load_stream(path)?;
            (loaded.stream, path.display().to_string(), loaded.checksum)
        }
    };
    let info = StreamInfo {
        source,
        checksum: format!("{crc:08x}"),
        num_tasks: stream.num_tasks(),
        dim: stream.dim(),
        class_order: stream.class_order(),
    };
    Ok((stream, info))
}

pub fn run_experiment(config: &RunConfig) -> std::result::Result<MetricsReport, Box<RunFailure>> {
    execute(config, None).map(|a| a.report)
}

pub fn execute(
    config: &RunConfig,
    traces: Option<&mut dyn TraceSink>,
) -> std::result::Result<RunArtifacts, Box<RunFailure>> {
    config.validate()?;
    let (stream, info) = build_stream(config)?;
    execute_on(config, stream, info, traces)
}

fn checkpoint_root(config: &RunConfig) -> Option<PathBuf> {
    match (&config.output_dir, config.checkpoint_every) {
        (Some(dir), n) if n > 0 => Some(dir.join("checkpoints")),
        _ => None,
    }
}

struct Progress {
    steps: Vec<Vec<StepPredictions>>,
    log: Vec<EpochRecord>,
}

fn build_report(
    config: &RunConfig,
    info: &StreamInfo,
    steps: &[Vec<StepPredictions>],
    audit: AuditSummary,
    status: RunStatus,
) -> Result<MetricsReport> {
    let strategies = config
        .strategies
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let per_step: Vec<StepPredictions> = steps.iter().map(|row| row[i].clone()).collect();
            if per_step.is_empty() {
                Ok(metrics::aggregate(s, Vec::new()))
            } else {
                metrics::compute_metrics(s, &per_step)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        version: REPORT_VERSION,
        variant: config.variant_name().to_string(),
        seed: config.train.seed,
        config: config.clone(),
        stream: info.clone(),
        status,
        completed_tasks: steps.len(),
        strategies,
        audit,
    })
}

/// Runs the full protocol on an already built stream.
pub fn execute_on(
    config: &RunConfig,
    stream: TaskStream,
    info: StreamInfo,
    mut traces: Option<&mut dyn TraceSink>,
) -> std::result::Result<RunArtifacts, Box<RunFailure>> {
    config.validate()?;
    let dim = stream.dim();
    let (train_splits, eval) = stream.into_parts();
    let mut vault = TrainVault::new(train_splits);
    let mut state = ModelState {
        adapters: Vec::new(),
        mop: MoPParams::identity(dim, config.train.num_projectors),
        store: DistributionStore::new(),
    };
    let mut progress = Progress { steps: Vec::new(), log: Vec::new() };

    let mut outcome = Ok(());
    for t in 0..eval.tasks.len() {
        outcome = run_task(config, t, &eval, &mut vault, &mut state, &mut progress, reborrow(&mut traces));
        if outcome.is_err() {
            break;
        }
        if let Some(root) = checkpoint_root(config) {
            let last = t + 1 == eval.tasks.len();
            if (t + 1) % config.checkpoint_every == 0 || last {
                if let Err(e) = checkpoint::save_checkpoint(&root, t, &state) {
                    outcome = Err(e);
                    break;
                }
            }
        }
    }

    let audit = vault.audit().clone();
    match outcome {
        Ok(()) => {
            let report = build_report(config, &info, &progress.steps, audit, RunStatus::Complete)?;
            Ok(RunArtifacts { report, training_log: progress.log, state })
        }
        Err(error) => {
            let status = RunStatus::Failed { error: error.to_string() };
            let partial = build_report(config, &info, &progress.steps, audit, status).ok();
            if let (Some(dir), Some(p)) = (&config.output_dir, &partial) {
                if let Err(e) = super::write_atomic(&dir.join("report.partial.json"), p.to_json().as_bytes()) {
                    log::error!("could not write partial report: {e}");
                }
            }
            Err(Box::new(RunFailure { error, partial }))
        }
    }
}

fn reborrow<'b>(t: &'b mut Option<&mut dyn TraceSink>) -> Option<&'b mut dyn TraceSink> {
    match t {
        Some(x) => Some(&mut **x),
        None => None,
    }
}

fn run_task(
    config: &RunConfig,
    t: usize,
    eval: &EvalStream,
    vault: &mut TrainVault,
    state: &mut ModelState,
    progress: &mut Progress,
    traces: Option<&mut dyn TraceSink>,
) -> Result<()> {
    let tc = &config.train;
    let dim = eval.dim;
    vault.begin_task(t);
    debug_assert_eq!(vault.held_before_current(), 0);
    let split = vault.take(t)?;

    let adapter = if config.use_adapters {
        let (adapter, log) = training::train_stage1(t, &split, &eval.text, tc)?;
        if let Some(last) = log.last() {
            log::info!("task {t} stage1: loss {:.4} acc {:.3}", last.loss, last.accuracy);
        }
        progress.log.extend(log);
        adapter
    } else {
        AdapterParams::identity(t, dim)
    };
    training::capture_distributions(t, &split, &eval.tasks[t].class_ids, &adapter, &mut state.store, tc.covariance)?;
    vault.release(split);
    state.adapters.push(adapter);

    if config.use_mop {
        if t == 0 || tc.mop_cold_start {
            state.mop = tc.init_mop(dim, t)?;
        }
        let log = training::train_stage2(&state.store, t, &eval.text, &mut state.mop, tc)?;
        if let Some(last) = log.last() {
            log::info!("task {t} stage2: loss {:.4} acc {:.3}", last.loss, last.accuracy);
        }
        progress.log.extend(log);
    }

    let step = evaluate_step(config, eval, t, state, traces)?;
    for (s, p) in config.strategies.iter().zip(&step) {
        let (acc, _) = metrics::accuracy_and_mcr(&p.predictions, &p.labels, &p.class_ids)?;
        log::info!("task {t} {s}: accuracy {acc:.4}");
    }
    progress.steps.push(step);
    Ok(())
}

/// Evaluates the model after task `t` on the test data of tasks `0..=t`.
/// Branch records are computed once per sample and every strategy selects
/// from the same records. Returns one entry per configured strategy.
pub fn evaluate_step(
    config: &RunConfig,
    eval: &EvalStream,
    t: usize,
    state: &ModelState,
    mut traces: Option<&mut dyn TraceSink>,
) -> Result<Vec<StepPredictions>> {
    let classes = eval.classes_up_to(t);
    let scorer = BranchScorer::with_classes(
        &state.adapters[..=t],
        &state.mop,
        &eval.text,
        &classes,
        config.train.tau,
        config.energy_mode,
    )?;
    let total: usize = eval.tasks[..=t].iter().map(|x| x.test.len()).sum();
    let mut out: Vec<StepPredictions> = config
        .strategies
        .iter()
        .map(|_| StepPredictions {
            predictions: Vec::with_capacity(total),
            labels: Vec::with_capacity(total),
            class_ids: classes.clone(),
            true_task_selections: Some(0),
        })
        .collect();
    for task in &eval.tasks[..=t] {
        for r in 0..task.test.len() {
            let label = task.test.labels[r];
            let trace = scorer.trace(task.test.embeddings.row(r), &config.strategies)?;
            for (sel, acc) in trace.selections.iter().zip(out.iter_mut()) {
                acc.predictions.push(sel.predicted_class);
                acc.labels.push(label);
                if sel.selected_task == task.task_id {
                    *acc.true_task_selections.as_mut().expect("initialized") += 1;
                }
            }
            if let Some(sink) = reborrow(&mut traces) {
                sink.record(t, &SampleRef { task: task.task_id, index: r, label }, &trace)?;
            }
        }
    }
    Ok(out)
}

/// Recomputes the report from the per-task checkpoints under
/// `checkpoint_root`. Every task needs a checkpoint.
pub fn regenerate_report(config: &RunConfig, checkpoint_root: &Path) -> Result<MetricsReport> {
    config.validate()?;
    let (stream, info) = build_stream(config)?;
    let (_, eval) = stream.into_parts();
    let mut steps = Vec::with_capacity(eval.tasks.len());
    for t in 0..eval.tasks.len() {
        let dir = checkpoint::checkpoint_dir(checkpoint_root, t);
        if !dir.exists() {
            return Err(CilError::InvalidArgument(format!(
                "no checkpoint for task {t} under {}; regeneration needs one per task",
                checkpoint_root.display()
            )));
        }
        let (manifest, state) = checkpoint::load_checkpoint(&dir)?;
        if manifest.task != t || state.adapters.len() != t + 1 || manifest.dim != eval.dim {
            return Err(CilError::CorruptFile(format!("checkpoint {} does not match task {t}", dir.display())));
        }
        steps.push(evaluate_step(config, &eval, t, &state, None)?);
    }
    // the audit belongs to the training run and is not stored in checkpoints
    build_report(config, &info, &steps, AuditSummary::default(), RunStatus::Complete)
}
