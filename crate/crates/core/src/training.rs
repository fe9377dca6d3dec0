//! Two-stage optimization.
//!
//! Stage-I fits one task's adapter on that task's real backbone embeddings
//! with a task-local cross-entropy over image–text cosine logits. After it,
//! per-class Gaussians of the adapted features are captured. Stage-II fits the
//! shared MoP on pseudo-features drawn from every stored class.
//!
//! Both stages use AdamW with a per-stage cosine decay to zero.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{AdapterParams, LabeledEmbeddings, TextEmbeddingTable};
use crate::error::{invalid, CilError, Result};
use crate::memory::{estimate_gaussian_with, sample_pseudo, CovarianceMode, DistributionStore, GaussianClassStats};
use crate::mop::{self, MoPParams};
use crate::numerics::tape::Gradients;
use crate::numerics::{self, GradTape, Matrix, NodeId, SeededRng};
use crate::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// rng stream tags
const TAG_ADAPTER_INIT: u64 = 1;
const TAG_STAGE1_SHUFFLE: u64 = 2;
const TAG_MOP_INIT: u64 = 3;
const TAG_PSEUDO: u64 = 4;
const TAG_STAGE2_SHUFFLE: u64 = 5;

fn default_stage1_epochs() -> usize {
    30
}
fn default_stage2_epochs() -> usize {
    5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    64
}
fn default_pseudo_per_class() -> usize {
    256
}
fn default_adapter_rank() -> usize {
    64
}
fn default_num_projectors() -> usize {
    3
}
fn default_tau() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Pseudo-features drawn per stored class for Stage-II.
    #[serde(default = "default_pseudo_per_class")]
    pub pseudo_per_class: usize,
    /// Adapter bottleneck width.
    #[serde(default = "default_adapter_rank")]
    pub adapter_rank: usize,
    #[serde(default = "default_num_projectors")]
    pub num_projectors: usize,
    /// Projector hidden width; `None` means D/4.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    /// Similarity temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Re-initialize the MoP before every Stage-II instead of continuing.
    #[serde(default)]
    pub mop_cold_start: bool,
    #[serde(default)]
    pub covariance: CovarianceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: default_stage1_epochs(),
            stage2_epochs: default_stage2_epochs(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            pseudo_per_class: default_pseudo_per_class(),
            adapter_rank: default_adapter_rank(),
            num_projectors: default_num_projectors(),
            projector_hidden: None,
            tau: default_tau(),
            seed: 0,
            mop_cold_start: false,
            covariance: CovarianceMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("stage1_epochs", self.stage1_epochs),
            ("stage2_epochs", self.stage2_epochs),
            ("batch_size", self.batch_size),
            ("pseudo_per_class", self.pseudo_per_class),
            ("adapter_rank", self.adapter_rank),
            ("num_projectors", self.num_projectors),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CilError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.projector_hidden == Some(0) {
            return Err(CilError::Config("projector_hidden must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CilError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CilError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CilError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn projector_hidden_for(&self, dim: usize) -> usize {
        self.projector_hidden.unwrap_or_else(|| mop::default_hidden(dim))
    }

    /// Fresh MoP for embedding dimension `dim`, seeded from the run seed.
    pub fn init_mop(&self, dim: usize, task: usize) -> Result<MoPParams> {
        let mut rng = SeededRng::keyed(self.seed, &[TAG_MOP_INIT, task as u64]);
        MoPParams::new(dim, self.num_projectors, self.projector_hidden_for(dim), &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr·½(1 + cos(π·k/(S−1)))` at 0-based update k of S: the first update
    /// uses the full rate and the last uses zero.
    Cosine {
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { total_steps } => {
                if total_steps <= 1 {
                    return 1.0;
                }
                let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// AdamW state for one parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    stage: &'static str,
    task: usize,
}

impl OptimizerState {
    pub fn new(params: &impl ParamSet, base_lr: f64, weight_decay: f64, schedule: LrSchedule) -> Self {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        Self {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            base_lr,
            weight_decay,
            schedule,
            stage: "optimizer",
            task: 0,
        }
    }

    /// Context reported in divergence errors.
    pub fn with_context(mut self, stage: &'static str, task: usize) -> Self {
        self.stage = stage;
        self.task = task;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.base_lr * self.schedule.factor(self.step)
    }

    /// One decoupled-weight-decay Adam update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut impl ParamSet, grads: &[&[f64]]) -> Result<f64> {
        let mut slices = params.param_slices_mut();
        if slices.len() != grads.len() || slices.len() != self.first_moment.len() {
            return Err(invalid(format!(
                "optimizer: {} parameter buffers, {} gradients, {} moment buffers",
                slices.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in slices.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(invalid(format!("optimizer: shape mismatch in buffer {i}")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(CilError::TrainingDiverged {
                    stage: self.stage,
                    task: self.task,
                    step: self.step,
                    detail: format!("non-finite gradient {} in buffer {i} at index {j}", g[j]),
                });
            }
        }

        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in slices.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * (1.0 - lr * self.weight_decay) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(lr)
    }
}

/// `−log softmax(logits)[target]`, computed with a max shift.
pub fn cross_entropy_loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(invalid(format!("target {target} outside {} logits", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("logits must be finite"));
    }
    Ok(numerics::logsumexp(logits) - logits[target])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub task: usize,
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Training accuracy measured during the epoch's forward passes.
    pub accuracy: f64,
}

/// Where a training step happens; used in divergence errors.
#[derive(Clone, Copy)]
struct StepContext {
    stage: &'static str,
    task: usize,
    step: usize,
}

impl StepContext {
    fn diverged(self, detail: String) -> CilError {
        CilError::TrainingDiverged { stage: self.stage, task: self.task, step: self.step, detail }
    }
}

/// Per-batch forward/backward shared by both stages: scores `features` (an
/// already-recorded batch node) against `text` and adds the mean
/// cross-entropy. Returns the loss node and the number of correct argmaxes.
fn record_cosine_ce<'a>(
    tape: &mut GradTape<'a>,
    features: NodeId,
    text: &'a Matrix,
    tau: f64,
    targets: &[usize],
    ctx: StepContext,
) -> Result<(NodeId, usize)> {
    if let Some(v) = tape.value(features).iter().find(|v| !v.is_finite()) {
        return Err(ctx.diverged(format!("feature value became {v}")));
    }
    let zn = tape.row_normalize(features)?;
    let t = tape.constant_matrix(text)?;
    let cos = tape.matmul_nt(zn, t)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    let c = text.rows();
    let correct = tape.value(logits).chunks(c).zip(targets).filter(|(row, &t)| numerics::argmax(row) == t).count();
    let loss = tape.softmax_cross_entropy(logits, targets)?;
    Ok((loss, correct))
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    out
}

fn check_finite_loss(loss: f64, ctx: StepContext) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ctx.diverged(format!("loss became {loss}")))
    }
}

fn grads_as_slices(g: &Gradients) -> Vec<&[f64]> {
    (0..g.len()).map(|i| g.get(i)).collect()
}

/// Label → position in the ascending class list.
fn local_targets(labels: &[u32], classes: &[u32], task: usize) -> Result<Vec<usize>> {
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    labels
        .iter()
        .map(|l| index.get(l).copied().ok_or_else(|| invalid(format!("label {l} does not belong to task {task}"))))
        .collect()
}

/// Trains task `task_id`'s adapter on its real training embeddings. Only the
/// returned adapter is optimized; the backbone embeddings and the text table
/// are read-only.
pub fn train_stage1(
    task_id: usize,
    data: &LabeledEmbeddings,
    table: &TextEmbeddingTable,
    config: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochRecord>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid(format!("task {task_id} has no training data")));
    }
    if data.dim() != table.dim() {
        return Err(invalid(format!("embedding dim {} does not match table dim {}", data.dim(), table.dim())));
    }
    let classes = table.classes_of_task(task_id);
    if classes.is_empty() {
        return Err(invalid(format!("task {task_id} has no classes in the text table")));
    }
    let targets = local_targets(&data.labels, &classes, task_id)?;
    let text = table.matrix_for(&classes)?;

    let mut init_rng = SeededRng::keyed(config.seed, &[TAG_ADAPTER_INIT, task_id as u64]);
    let mut adapter = AdapterParams::new(task_id, data.dim(), config.adapter_rank, &mut init_rng)?;

    let n = data.len();
    let bs = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let schedule = LrSchedule::Cosine { total_steps: steps_per_epoch * config.stage1_epochs };
    let mut opt =
        OptimizerState::new(&adapter, config.lr, config.weight_decay, schedule).with_context("stage1", task_id);

    let mut records = Vec::with_capacity(config.stage1_epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.stage1_epochs {
        let mut rng = SeededRng::keyed(config.seed, &[TAG_STAGE1_SHUFFLE, task_id as u64, epoch as u64]);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(bs) {
            let ctx = StepContext { stage: "stage1", task: task_id, step: opt.steps_taken() };
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let x = gather_rows(&data.embeddings, batch);
            let (loss, hits, grads) = {
                let mut tape = GradTape::new();
                let xn = tape.constant(batch.len(), data.dim(), Cow::Owned(x))?;
                let z = adapter.record(&mut tape, xn)?;
                let (loss, hits) = record_cosine_ce(&mut tape, z, &text, config.tau, &batch_targets, ctx)?;
                (tape.value(loss)[0], hits, tape.backward(loss)?)
            };
            check_finite_loss(loss, ctx)?;
            opt.step(&mut adapter, &grads_as_slices(&grads))?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        records.push(EpochRecord {
            stage: "stage1".into(),
            task: task_id,
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }
    Ok((adapter, records))
}

/// Estimates a Gaussian per class of the adapted training features and
/// appends them all to `store`. Nothing is appended if any class fails.
pub fn capture_distributions(
    task_id: usize,
    data: &LabeledEmbeddings,
    classes: &[u32],
    adapter: &AdapterParams,
    store: &mut DistributionStore,
    mode: CovarianceMode,
) -> Result<Vec<GaussianClassStats>> {
    let adapted = adapter.forward_batch(&data.embeddings)?;
    let adapted = LabeledEmbeddings::new(adapted, data.labels.clone())?;
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let stats = sorted
        .iter()
        .map(|&c| estimate_gaussian_with(&adapted.rows_of_class(c), task_id, c, mode))
        .collect::<Result<Vec<_>>>()?;
    for s in &stats {
        store.append(s.clone())?;
    }
    Ok(stats)
}

/// Fixed Stage-II training set: `n_per_class` draws from every class of
/// tasks `0..=up_to_task`, with labels indexing the ascending class list.
pub fn pseudo_feature_set(
    store: &DistributionStore,
    up_to_task: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<(Vec<u32>, Matrix, Vec<usize>)> {
    let snapshot = store.snapshot(up_to_task);
    if snapshot.is_empty() {
        return Err(invalid(format!("no stored distributions for tasks up to {up_to_task}")));
    }
    let mut classes: Vec<u32> = snapshot.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let dim = snapshot[0].dim();
    let mut data = Vec::with_capacity(snapshot.len() * n_per_class * dim);
    let mut labels = Vec::with_capacity(snapshot.len() * n_per_class);
    for s in &snapshot {
        let mut rng = SeededRng::keyed(seed, &[TAG_PSEUDO, up_to_task as u64, s.task_id as u64, u64::from(s.class_id)]);
        let x = sample_pseudo(s, n_per_class, &mut rng)?;
        data.extend_from_slice(x.data());
        labels.extend(std::iter::repeat_n(index[&s.class_id], n_per_class));
    }
    Ok((classes, Matrix::from_vec(labels.len(), dim, data)?, labels))
}

/// Trains the shared MoP on pseudo-features from every class of tasks
/// `0..=up_to_task`. Only `mop` is modified.
pub fn train_stage2(
    store: &DistributionStore,
    up_to_task: usize,
    table: &TextEmbeddingTable,
    mop: &mut MoPParams,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_stage2_observed(store, up_to_task, table, mop, config, |_, _| {})
}

/// [`train_stage2`], calling `after_epoch(epoch, mop)` once each epoch ends.
pub fn train_stage2_observed(
    store: &DistributionStore,
    up_to_task: usize,
    table: &TextEmbeddingTable,
    mop: &mut MoPParams,
    config: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &MoPParams),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    mop.validate()?;
    let (classes, x, targets) = pseudo_feature_set(store, up_to_task, config.pseudo_per_class, config.seed)?;
    if x.cols() != mop.dim() {
        return Err(invalid(format!("pseudo-feature dim {} does not match MoP dim {}", x.cols(), mop.dim())));
    }
    let text = table.matrix_for(&classes)?;

    let n = x.rows();
    let bs = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let schedule = LrSchedule::Cosine { total_steps: steps_per_epoch * config.stage2_epochs };
    let mut opt = OptimizerState::new(mop, config.lr, config.weight_decay, schedule).with_context("stage2", up_to_task);

    let mut records = Vec::with_capacity(config.stage2_epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.stage2_epochs {
        let mut rng = SeededRng::keyed(config.seed, &[TAG_STAGE2_SHUFFLE, up_to_task as u64, epoch as u64]);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(bs) {
            let ctx = StepContext { stage: "stage2", task: up_to_task, step: opt.steps_taken() };
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let xb = gather_rows(&x, batch);
            let (loss, hits, grads) = {
                let mut tape = GradTape::new();
                let xn = tape.constant(batch.len(), x.cols(), Cow::Owned(xb))?;
                let z = mop.record(&mut tape, xn)?;
                let (loss, hits) = record_cosine_ce(&mut tape, z, &text, config.tau, &batch_targets, ctx)?;
                (tape.value(loss)[0], hits, tape.backward(loss)?)
            };
            check_finite_loss(loss, ctx)?;
            opt.step(mop, &grads_as_slices(&grads))?;
            loss_sum += loss * batch.len() as f64;
            correct += hits;
        }
        records.push(EpochRecord {
            stage: "stage2".into(),
            task: up_to_task,
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
        after_epoch(epoch, mop);
    }
    Ok(records)
}

/// Mean cross-entropy and accuracy of `mop` over a fixed labeled set.
pub fn evaluate_mop(mop: &MoPParams, x: &Matrix, targets: &[usize], text: &Matrix, tau: f64) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for (r, &t) in targets.iter().enumerate() {
        let z = mop::mop_forward(x.row(r), mop)?;
        let (cos, probs) = mop::classify_with_text(&z, text, tau)?;
        let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
        loss += cross_entropy_loss(&logits, t)?;
        if probs.argmax() == t {
            correct += 1;
        }
    }
    let n = targets.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}
