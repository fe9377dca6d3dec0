//! Per-task checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and one binary blob
//! per module. Parameters are stored as little-endian f64 so that a restored
//! model reproduces its predictions bit for bit. The directory is assembled
//! under a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::AdapterParams;
use crate::error::{CilError, Result};
use crate::memory::{DistributionStore, GaussianClassStats};
use crate::mop::{MoPParams, ProjectorParams};
use crate::numerics::Matrix;
use crate::ParamSet;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything that survives a task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub adapters: Vec<AdapterParams>,
    pub mop: MoPParams,
    pub store: DistributionStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Last task included in this checkpoint.
    pub task: usize,
    pub dim: usize,
    pub adapters: Vec<BlobEntry>,
    pub mop: BlobEntry,
    pub store: BlobEntry,
    pub store_entries: usize,
}

pub fn checkpoint_dir(root: &Path, task: usize) -> PathBuf {
    root.join(format!("task_{task:03}"))
}

struct Blob(Vec<u8>);

impl Blob {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| CilError::InvalidArgument(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CilError::CorruptFile(format!("{} is truncated", self.name)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes =
            self.take(n.checked_mul(8).ok_or_else(|| CilError::CorruptFile(format!("{} is corrupt", self.name)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.f64s(rows * cols)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| CilError::CorruptFile(format!("{}: {e}", self.name)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CilError::CorruptFile(format!("{} has trailing bytes", self.name)));
        }
        Ok(())
    }
}

fn encode_adapter(a: &AdapterParams) -> Result<Vec<u8>> {
    let mut b = Blob(Vec::new());
    b.u32(a.task_id)?;
    b.u32(a.dim())?;
    b.u32(a.bottleneck())?;
    for s in a.param_slices() {
        b.f64s(s);
    }
    Ok(b.0)
}

fn decode_adapter(bytes: &[u8], name: &str) -> Result<AdapterParams> {
    let mut r = BlobReader { bytes, pos: 0, name };
    let task_id = r.u32()?;
    let dim = r.u32()?;
    let rank = r.u32()?;
    let a = AdapterParams {
        task_id,
        w_down: r.matrix(rank, dim)?,
        b_down: r.f64s(rank)?,
        w_up: r.matrix(dim, rank)?,
        b_up: r.f64s(dim)?,
    };
    r.finish()?;
    a.validate().map_err(|e| CilError::CorruptFile(format!("{name}: {e}")))?;
    Ok(a)
}

fn encode_mop(m: &MoPParams) -> Result<Vec<u8>> {
    let mut b = Blob(Vec::new());
    b.u32(m.dim())?;
    b.u32(m.num_projectors())?;
    for p in &m.projectors {
        b.u32(p.hidden())?;
    }
    for s in m.param_slices() {
        b.f64s(s);
    }
    Ok(b.0)
}

fn decode_mop(bytes: &[u8], name: &str) -> Result<MoPParams> {
    let mut r = BlobReader { bytes, pos: 0, name };
    let dim = r.u32()?;
    let count = r.u32()?;
    let hidden = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let gate = r.matrix(count, dim)?;
    let mut projectors = Vec::with_capacity(count);
    for h in hidden {
        projectors.push(ProjectorParams {
            w1: r.matrix(h, dim)?,
            b1: r.f64s(h)?,
            w2: r.matrix(dim, h)?,
            b2: r.f64s(dim)?,
        });
    }
    r.finish()?;
    let m = MoPParams { gate, projectors };
    m.validate().map_err(|e| CilError::CorruptFile(format!("{name}: {e}")))?;
    Ok(m)
}

fn encode_store(store: &DistributionStore) -> Result<Vec<u8>> {
    let mut b = Blob(Vec::new());
    b.u32(store.len())?;
    for s in store.entries() {
        b.u32(s.task_id)?;
        b.0.extend_from_slice(&s.class_id.to_le_bytes());
        b.0.extend_from_slice(&(s.sample_count as u64).to_le_bytes());
        b.u32(s.dim())?;
        b.f64s(&s.mean);
        b.f64s(s.covariance.data());
    }
    Ok(b.0)
}

fn decode_store(bytes: &[u8], name: &str) -> Result<DistributionStore> {
    let mut r = BlobReader { bytes, pos: 0, name };
    let n = r.u32()?;
    let mut store = DistributionStore::new();
    for _ in 0..n {
        let task_id = r.u32()?;
        let class_id = r.u32()? as u32;
        let sample_count = r.u64()? as usize;
        let d = r.u32()?;
        let mean = r.f64s(d)?;
        let covariance = r.matrix(d, d)?;
        store.append(GaussianClassStats { task_id, class_id, mean, covariance, sample_count })?;
    }
    r.finish()?;
    Ok(store)
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

/// Writes the state after `task` to `<root>/task_NNN`, replacing any
/// earlier checkpoint of the same task.
pub fn save_checkpoint(root: &Path, task: usize, state: &ModelState) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let final_dir = checkpoint_dir(root, task);
    let tmp_dir = root.join(format!(".task_{task:03}.tmp"));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    fs::create_dir(&tmp_dir)?;

    let write = |file: String, bytes: Vec<u8>| -> Result<BlobEntry> {
        fs::write(tmp_dir.join(&file), &bytes)?;
        Ok(BlobEntry { crc32: crc_hex(&bytes), file })
    };
    let adapters = state
        .adapters
        .iter()
        .map(|a| write(format!("adapter_{:03}.bin", a.task_id), encode_adapter(a)?))
        .collect::<Result<Vec<_>>>()?;
    let mop = write("mop.bin".into(), encode_mop(&state.mop)?)?;
    let store = write("store.bin".into(), encode_store(&state.store)?)?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        task,
        dim: state.mop.dim(),
        adapters,
        mop,
        store,
        store_entries: state.store.len(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CilError::InvalidArgument(e.to_string()))?;
    fs::write(tmp_dir.join("manifest.json"), json)?;

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp_dir, &final_dir)?;
    Ok(final_dir)
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<u8>> {
    if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
        return Err(CilError::CorruptFile(format!("manifest names an unexpected file {:?}", entry.file)));
    }
    let bytes = fs::read(dir.join(&entry.file))?;
    if crc_hex(&bytes) != entry.crc32 {
        return Err(CilError::CorruptFile(format!("{} fails its checksum", entry.file)));
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, ModelState)> {
    let raw = fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| CilError::CorruptFile(format!("manifest.json: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CilError::UnsupportedFormat(format!("checkpoint version {}", manifest.version)));
    }
    let adapters =
        manifest.adapters.iter().map(|e| decode_adapter(&read_blob(dir, e)?, &e.file)).collect::<Result<Vec<_>>>()?;
    let mop = decode_mop(&read_blob(dir, &manifest.mop)?, &manifest.mop.file)?;
    let store = decode_store(&read_blob(dir, &manifest.store)?, &manifest.store.file)?;
    if mop.dim() != manifest.dim
        || adapters.iter().any(|a| a.dim() != manifest.dim)
        || store.len() != manifest.store_entries
    {
        return Err(CilError::CorruptFile("checkpoint contents disagree with its manifest".into()));
    }
    Ok((manifest, ModelState { adapters, mop, store }))
}
