//! Experiment driver: task streams, the run loop, metrics, checkpoints,
//! multi-run studies and report output.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod stream;
pub mod studies;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use config::{RunConfig, StreamSource};
pub use experiment::{execute, regenerate_report, run_experiment, MetricsReport, RunArtifacts, RunFailure};
pub use stream::{load_stream, save_stream, synth_stream, validate_file, SynthSpec, TaskStream};

use crate::error::Result;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a run's report (JSON and text), curves and training log into `dir`.
pub fn write_run_outputs(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let r = &artifacts.report;
    write_atomic(&dir.join("report.json"), r.to_json().as_bytes())?;
    write_atomic(&dir.join("report.txt"), report::render_run(r).as_bytes())?;
    write_atomic(&dir.join("curves.tsv"), report::run_curves_tsv(r).as_bytes())?;
    let mut log = String::new();
    for rec in &artifacts.training_log {
        log.push_str(&serde_json::to_string(rec).expect("epoch record serializes"));
        log.push('\n');
    }
    write_atomic(&dir.join("training_log.jsonl"), log.as_bytes())?;
    Ok(())
}
