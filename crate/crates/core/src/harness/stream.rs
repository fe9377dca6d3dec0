//! Task streams: the synthetic generator and the binary embedding file.
//!
//! File layout (all integers u32 little-endian, floats f32 little-endian):
//!
//! ```text
//! "CILE" | version | D | task_count
//! per task:  class_count | class_id × class_count
//!            train_count | test_count
//!            train embeddings (train_count × D) | train labels (train_count)
//!            test embeddings (test_count × D)   | test labels (test_count)
//! text:      entry_count | (class_id | D floats) × entry_count
//! CRC32 of every preceding byte
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{LabeledEmbeddings, TextEmbeddingTable, TextEntry};
use crate::error::{invalid, CilError, Result};
use crate::numerics::{self, Matrix, SeededRng};

pub const MAGIC: &[u8; 4] = b"CILE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    /// Ascending.
    pub class_ids: Vec<u32>,
    pub train: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    dim: usize,
    tasks: Vec<Task>,
    text: TextEmbeddingTable,
}

impl TaskStream {
    /// Checks the incremental contract: class sets are disjoint across tasks,
    /// every label belongs to its task, every class has a text embedding, and
    /// no embedding appears in both splits of a task.
    pub fn new(dim: usize, mut tasks: Vec<Task>, text: TextEmbeddingTable) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid("a stream needs at least one task"));
        }
        if text.dim() != dim {
            return Err(CilError::CorruptFile(format!("text table dim {} differs from stream dim {dim}", text.dim())));
        }
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter_mut().enumerate() {
            if task.task_id != t {
                return Err(invalid(format!("task at position {t} has id {}", task.task_id)));
            }
            if task.class_ids.is_empty() {
                return Err(CilError::ContractViolation(format!("task {t} has no classes")));
            }
            task.class_ids.sort_unstable();
            let own: BTreeSet<u32> = task.class_ids.iter().copied().collect();
            if own.len() != task.class_ids.len() {
                return Err(CilError::ContractViolation(format!("task {t} lists a class twice")));
            }
            for &c in &task.class_ids {
                if !seen.insert(c) {
                    return Err(CilError::ContractViolation(format!("class {c} appears in more than one task")));
                }
                match text.entries().find(|e| e.class_id == c) {
                    None => return Err(CilError::IncompleteTable(c)),
                    Some(e) if e.task_id != t => {
                        return Err(CilError::ContractViolation(format!(
                            "text entry for class {c} is tagged task {}, but the class belongs to task {t}",
                            e.task_id
                        )))
                    }
                    Some(_) => {}
                }
            }
            for (name, split) in [("train", &task.train), ("test", &task.test)] {
                if split.dim() != dim && !split.is_empty() {
                    return Err(CilError::CorruptFile(format!(
                        "task {t} {name} dim {} differs from {dim}",
                        split.dim()
                    )));
                }
                if let Some(l) = split.labels.iter().find(|l| !own.contains(l)) {
                    return Err(CilError::ContractViolation(format!(
                        "task {t} {name} split has label {l} outside its classes"
                    )));
                }
            }
            let train_rows: HashSet<Vec<u64>> = (0..task.train.len())
                .map(|r| task.train.embeddings.row(r).iter().map(|v| v.to_bits()).collect())
                .collect();
            for r in 0..task.test.len() {
                let key: Vec<u64> = task.test.embeddings.row(r).iter().map(|v| v.to_bits()).collect();
                if train_rows.contains(&key) {
                    return Err(CilError::ContractViolation(format!("task {t}: test row {r} also appears in train")));
                }
            }
        }
        if let Some(extra) = text.entries().find(|e| !seen.contains(&e.class_id)) {
            return Err(CilError::ContractViolation(format!(
                "text entry for class {} belongs to no task",
                extra.class_id
            )));
        }
        Ok(Self { dim, tasks, text })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t]
    }

    pub fn text(&self) -> &TextEmbeddingTable {
        &self.text
    }

    /// Class ids of tasks `0..=t`, ascending.
    pub fn classes_up_to(&self, t: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tasks[..=t].iter().flat_map(|x| x.class_ids.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn class_order(&self) -> Vec<Vec<u32>> {
        self.tasks.iter().map(|t| t.class_ids.clone()).collect()
    }

    /// Splits the stream into its training splits and the rest, so that the
    /// runner can hand training data out one task at a time.
    pub fn into_parts(self) -> (Vec<LabeledEmbeddings>, EvalStream) {
        let mut train = Vec::with_capacity(self.tasks.len());
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for t in self.tasks {
            train.push(t.train);
            tasks.push(EvalTask { task_id: t.task_id, class_ids: t.class_ids, test: t.test });
        }
        (train, EvalStream { dim: self.dim, tasks, text: self.text })
    }
}

/// A stream without its training splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStream {
    pub dim: usize,
    pub tasks: Vec<EvalTask>,
    pub text: TextEmbeddingTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub task_id: usize,
    pub class_ids: Vec<u32>,
    pub test: LabeledEmbeddings,
}

impl EvalStream {
    pub fn classes_up_to(&self, t: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tasks[..=t].iter().flat_map(|x| x.class_ids.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }
}

fn default_tasks() -> usize {
    5
}
fn default_classes_per_task() -> usize {
    10
}
fn default_dim() -> usize {
    64
}
fn default_train_per_class() -> usize {
    100
}
fn default_test_per_class() -> usize {
    50
}
fn default_noise_std() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    1.0
}
fn default_rho() -> f64 {
    0.6
}
fn default_text_noise() -> f64 {
    2.0
}

/// Parameters of the synthetic generator.
///
/// Each class gets a unit prototype. With `rho > 0`, class `k` of every task
/// leans toward the same shared direction, `√(1−ρ)·u + √ρ·s_k`, so classes in
/// the same slot of different tasks look alike. Image embeddings are
/// `separation·prototype + N(0, noise_std²/D · I)`; text embeddings are the
/// prototype plus `text_noise/√D`-scaled Gaussian noise, normalized.
///
/// The defaults leave the raw embeddings confusable (zero-shot accuracy
/// around one half), so that training has something to fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_classes_per_task")]
    pub classes_per_task: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_text_noise")]
    pub text_noise: f64,
    /// Stream seed; `None` follows the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            classes_per_task: default_classes_per_task(),
            dim: default_dim(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            noise_std: default_noise_std(),
            separation: default_separation(),
            rho: default_rho(),
            text_noise: default_text_noise(),
            seed: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("dim", self.dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(CilError::Config(format!("synthetic {name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CilError::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.noise_std >= 0.0) || !(self.text_noise >= 0.0) {
            return Err(CilError::Config("noise levels must be non-negative".into()));
        }
        if !self.separation.is_finite() || self.separation <= 0.0 {
            return Err(invalid(format!("infeasible separation {}: must be positive", self.separation)));
        }
        Ok(())
    }
}

const TAG_PROTOTYPES: u64 = 11;
const TAG_ASSIGNMENT: u64 = 12;
const TAG_TEXT: u64 = 13;
const TAG_SAMPLES: u64 = 14;

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Builds a synthetic stream. Values are rounded to f32 so that a saved
/// stream loads back equal. Global class ids `0..T·K` are shuffled onto
/// tasks with the stream seed; the resulting order is part of the stream.
pub fn synth_stream(spec: &SynthSpec, run_seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(run_seed);
    let (t_count, k, d) = (spec.tasks, spec.classes_per_task, spec.dim);

    let mut proto_rng = SeededRng::keyed(seed, &[TAG_PROTOTYPES]);
    let shared: Vec<Vec<f64>> = (0..k).map(|_| proto_rng.unit_vector(d)).collect();
    let (a, b) = ((1.0 - spec.rho).sqrt(), spec.rho.sqrt());
    let mut prototypes = Vec::with_capacity(t_count * k);
    for _ in 0..t_count {
        for s in &shared {
            let u = proto_rng.unit_vector(d);
            let mixed: Vec<f64> = u.iter().zip(s).map(|(ui, si)| a * ui + b * si).collect();
            // u and s are nearly but not exactly orthogonal
            prototypes.push(numerics::normalize(&mixed).unwrap_or(u));
        }
    }

    let mut ids: Vec<u32> = (0..(t_count * k) as u32).collect();
    SeededRng::keyed(seed, &[TAG_ASSIGNMENT]).shuffle(&mut ids);

    let noise = spec.noise_std / (d as f64).sqrt();
    let text_noise = spec.text_noise / (d as f64).sqrt();
    let mut entries = Vec::with_capacity(t_count * k);
    let mut tasks = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut train_rows = Vec::with_capacity(k * spec.train_per_class * d);
        let mut test_rows = Vec::with_capacity(k * spec.test_per_class * d);
        let (mut train_labels, mut test_labels) = (Vec::new(), Vec::new());
        for slot in 0..k {
            let class = ids[t * k + slot];
            let proto = &prototypes[t * k + slot];
            let mut text_rng = SeededRng::keyed(seed, &[TAG_TEXT, u64::from(class)]);
            let text: Vec<f64> = proto.iter().map(|p| f32_round(p + text_noise * text_rng.standard_normal())).collect();
            entries.push(TextEntry { class_id: class, task_id: t, vector: text });

            let mut rng = SeededRng::keyed(seed, &[TAG_SAMPLES, u64::from(class)]);
            for (n, rows, labels) in [
                (spec.train_per_class, &mut train_rows, &mut train_labels),
                (spec.test_per_class, &mut test_rows, &mut test_labels),
            ] {
                for _ in 0..n {
                    rows.extend(proto.iter().map(|p| f32_round(spec.separation * p + noise * rng.standard_normal())));
                    labels.push(class);
                }
            }
        }
        let mut class_ids = ids[t * k..(t + 1) * k].to_vec();
        class_ids.sort_unstable();
        tasks.push(Task {
            task_id: t,
            class_ids,
            train: LabeledEmbeddings::new(Matrix::from_vec(train_labels.len(), d, train_rows)?, train_labels)?,
            test: LabeledEmbeddings::new(Matrix::from_vec(test_labels.len(), d, test_rows)?, test_labels)?,
        });
    }
    TaskStream::new(d, tasks, TextEmbeddingTable::new(d, entries)?)
}

/// Stream plus the CRC32 recorded in its file trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStream {
    pub stream: TaskStream,
    pub checksum: u32,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit the file format")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a stream to the binary format. Values are narrowed to f32.
pub fn encode_stream(stream: &TaskStream) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, to_u32(stream.dim, "dimension")?);
    put_u32(&mut buf, to_u32(stream.tasks.len(), "task count")?);
    for task in &stream.tasks {
        put_u32(&mut buf, to_u32(task.class_ids.len(), "class count")?);
        for &c in &task.class_ids {
            put_u32(&mut buf, c);
        }
        put_u32(&mut buf, to_u32(task.train.len(), "train count")?);
        put_u32(&mut buf, to_u32(task.test.len(), "test count")?);
        for split in [&task.train, &task.test] {
            put_f32s(&mut buf, split.embeddings.data());
            for &l in &split.labels {
                put_u32(&mut buf, l);
            }
        }
    }
    put_u32(&mut buf, to_u32(stream.text.len(), "text entry count")?);
    for e in stream.text.entries() {
        put_u32(&mut buf, e.class_id);
        put_f32s(&mut buf, stream.text.raw_vector(e.class_id)?);
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<u32> {
    let bytes = encode_stream(stream)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4-byte trailer"));
    super::write_atomic(path, &bytes)?;
    Ok(crc)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CilError::CorruptFile(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let bytes =
            self.take(n.checked_mul(4).ok_or_else(|| CilError::CorruptFile(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes =
            self.take(n.checked_mul(4).ok_or_else(|| CilError::CorruptFile(format!("{what} too large")))?, what)?;
        let out: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CilError::CorruptFile(format!("non-finite value in {what}")));
        }
        Ok(out)
    }
}

fn corrupt(e: CilError) -> CilError {
    match e {
        CilError::InvalidArgument(m) => CilError::CorruptFile(m),
        other => other,
    }
}

/// Parses and checks a stream file held in memory.
pub fn decode_stream(bytes: &[u8]) -> Result<LoadedStream> {
    if bytes.len() < 8 {
        return Err(CilError::CorruptFile(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(CilError::UnsupportedFormat(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CilError::UnsupportedFormat(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    if bytes.len() < 20 {
        return Err(CilError::CorruptFile("truncated header".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));

    let mut r = Reader { bytes: payload, pos: 8 };
    let dim = r.count("dimension")?;
    if dim == 0 {
        return Err(CilError::CorruptFile("dimension is zero".into()));
    }
    let task_count = r.count("task count")?;
    let mut tasks = Vec::new();
    let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
    for t in 0..task_count {
        let class_count = r.count("class count")?;
        let class_ids = r.u32s(class_count, "class ids")?;
        for &c in &class_ids {
            owner.insert(c, t);
        }
        let train_count = r.count("train count")?;
        let test_count = r.count("test count")?;
        let mut splits = Vec::with_capacity(2);
        for (name, n) in [("train", train_count), ("test", test_count)] {
            let values = r.f32s(n.saturating_mul(dim), &format!("task {t} {name} embeddings"))?;
            let labels = r.u32s(n, &format!("task {t} {name} labels"))?;
            let m = Matrix::from_vec(n, dim, values).map_err(corrupt)?;
            splits.push(LabeledEmbeddings::new(m, labels).map_err(corrupt)?);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        tasks.push(Task { task_id: t, class_ids, train, test });
    }
    let entry_count = r.count("text entry count")?;
    let mut entries = Vec::with_capacity(entry_count);
    for i in 0..entry_count {
        let class_id = r.u32(&format!("text entry {i} class id"))?;
        let vector = r.f32s(dim, &format!("text entry {i} vector"))?;
        // unknown classes are reported by the contract check below
        let task_id = owner.get(&class_id).copied().unwrap_or(usize::MAX);
        entries.push(TextEntry { class_id, task_id, vector });
    }
    if r.pos != payload.len() {
        return Err(CilError::CorruptFile(format!("{} unexpected bytes before the checksum", payload.len() - r.pos)));
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(CilError::CorruptFile(format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}")));
    }
    if task_count == 0 {
        return Err(CilError::CorruptFile("file contains no tasks".into()));
    }
    let table = TextEmbeddingTable::new(dim, entries).map_err(|e| match e {
        CilError::InvalidArgument(m) => CilError::CorruptFile(m),
        other => other,
    })?;
    let stream = TaskStream::new(dim, tasks, table).map_err(corrupt)?;
    Ok(LoadedStream { stream, checksum: stored })
}

pub fn load_stream(path: &Path) -> Result<LoadedStream> {
    let bytes = std::fs::read(path)?;
    decode_stream(&bytes)
}

/// Summary printed by `validate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSummary {
    pub dim: usize,
    pub tasks: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub checksum: String,
}

/// Full format and contract check of a stream file.
pub fn validate_file(path: &Path) -> Result<StreamSummary> {
    let loaded = load_stream(path)?;
    let s = &loaded.stream;
    Ok(StreamSummary {
        dim: s.dim(),
        tasks: s.num_tasks(),
        classes: s.text().len(),
        train_samples: s.tasks().iter().map(|t| t.train.len()).sum(),
        test_samples: s.tasks().iter().map(|t| t.test.len()).sum(),
        checksum: format!("{:08x}", loaded.checksum),
    })
}
