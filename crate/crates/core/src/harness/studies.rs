//! Multi-run studies: the component ablation grid, the strategy comparison
//! and the M / N_p sensitivity sweeps. Runs are independent and are spread
//! over worker threads; results are collected in a fixed order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::experiment::{run_experiment, MetricsReport, RunFailure};
use crate::error::{CilError, Result};
use crate::inference::Strategy;

type RunResult = std::result::Result<MetricsReport, Box<RunFailure>>;

/// Runs every config, at most `jobs` at a time, and returns the reports in
/// input order. The first failure is returned.
pub fn run_all(configs: &[RunConfig], jobs: usize) -> std::result::Result<Vec<MetricsReport>, Box<RunFailure>> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_experiment(&configs[i]);
                slots.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no poisoned runs").into_iter().map(|r| r.expect("every run finished")).collect()
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn for_seed(base: &RunConfig, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.train.seed = seed;
    c.output_dir = None;
    c.checkpoint_every = 0;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_adapters: bool,
    pub use_mop: bool,
    /// Headline strategy Last-A, one per seed.
    pub last_a: Vec<f64>,
    pub mean_last_a: f64,
    pub mean_avg_a: f64,
    pub mean_last_m: f64,
    pub mean_avg_m: f64,
    /// Mean headline accuracy after each task.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Order of the grid rows: baseline, each component alone, both.
pub const ABLATION_GRID: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

fn row_from(reports: &[&MetricsReport]) -> AblationRow {
    let cfg = &reports[0].config;
    let heads: Vec<_> = reports.iter().map(|r| r.headline()).collect();
    let steps = heads.iter().map(|h| h.steps.len()).min().unwrap_or(0);
    AblationRow {
        variant: cfg.variant_name().into(),
        use_adapters: cfg.use_adapters,
        use_mop: cfg.use_mop,
        last_a: heads.iter().map(|h| h.last_a).collect(),
        mean_last_a: mean(&heads.iter().map(|h| h.last_a).collect::<Vec<_>>()),
        mean_avg_a: mean(&heads.iter().map(|h| h.avg_a).collect::<Vec<_>>()),
        mean_last_m: mean(&heads.iter().map(|h| h.last_m).collect::<Vec<_>>()),
        mean_avg_m: mean(&heads.iter().map(|h| h.avg_m).collect::<Vec<_>>()),
        curve: (0..steps).map(|i| mean(&heads.iter().map(|h| h.steps[i].accuracy).collect::<Vec<_>>())).collect(),
    }
}

/// The four-way component grid over `seeds`. Also returns every run report
/// (grid-row-major, then seed).
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> std::result::Result<(AblationReport, Vec<MetricsReport>), Box<RunFailure>> {
    if seeds.is_empty() {
        return Err(CilError::Config("at least one seed is required".into()).into());
    }
    let mut configs = Vec::new();
    for (adapters, mop) in ABLATION_GRID {
        for &seed in seeds {
            let mut c = for_seed(base, seed);
            c.use_adapters = adapters;
            c.use_mop = mop;
            configs.push(c);
        }
    }
    let reports = run_all(&configs, jobs)?;
    let rows = reports.chunks(seeds.len()).map(|chunk| row_from(&chunk.iter().collect::<Vec<_>>())).collect();
    let report = AblationReport { strategy: base.strategies[0], seeds: seeds.to_vec(), rows };
    Ok((report, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub last_a: Vec<f64>,
    pub mean_last_a: f64,
    pub mean_avg_a: f64,
    pub mean_last_m: f64,
    pub mean_avg_m: f64,
    /// Mean fraction of samples routed to their own task's branch, final step.
    pub mean_task_selection: Option<f64>,
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub seeds: Vec<u64>,
    pub rows: Vec<StrategyRow>,
}

impl StrategyComparison {
    pub fn row(&self, s: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }
}

/// Compares strategies on reports that each evaluated all of them.
pub fn compare_strategies(reports: &[MetricsReport], seeds: &[u64]) -> Result<StrategyComparison> {
    let first = reports.first().ok_or_else(|| CilError::InvalidArgument("no reports to compare".into()))?;
    let rows = first
        .strategies
        .iter()
        .map(|m| {
            let per: Vec<_> = reports
                .iter()
                .map(|r| {
                    r.strategy(m.strategy).ok_or_else(|| {
                        CilError::InvalidArgument(format!("a report does not include strategy {}", m.strategy))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let steps = per.iter().map(|h| h.steps.len()).min().unwrap_or(0);
            let sel: Vec<f64> =
                per.iter().filter_map(|h| h.steps.last().and_then(|s| s.task_selection_accuracy)).collect();
            Ok(StrategyRow {
                strategy: m.strategy,
                last_a: per.iter().map(|h| h.last_a).collect(),
                mean_last_a: mean(&per.iter().map(|h| h.last_a).collect::<Vec<_>>()),
                mean_avg_a: mean(&per.iter().map(|h| h.avg_a).collect::<Vec<_>>()),
                mean_last_m: mean(&per.iter().map(|h| h.last_m).collect::<Vec<_>>()),
                mean_avg_m: mean(&per.iter().map(|h| h.avg_m).collect::<Vec<_>>()),
                mean_task_selection: if sel.len() == per.len() { Some(mean(&sel)) } else { None },
                curve: (0..steps).map(|i| mean(&per.iter().map(|h| h.steps[i].accuracy).collect::<Vec<_>>())).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StrategyComparison { seeds: seeds.to_vec(), rows })
}

/// Full-method runs over `seeds` with every strategy evaluated on the same
/// branch outputs.
pub fn run_strategies(
    base: &RunConfig,
    seeds: &[u64],
    jobs: usize,
) -> std::result::Result<(StrategyComparison, Vec<MetricsReport>), Box<RunFailure>> {
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = for_seed(base, s);
            c.strategies = Strategy::ALL.to_vec();
            c
        })
        .collect();
    let reports = run_all(&configs, jobs)?;
    let cmp = compare_strategies(&reports, seeds)?;
    Ok((cmp, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub last_a: Vec<f64>,
    pub mean_last_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    /// Best minus worst mean Last-A.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub sweeps: Vec<Sweep>,
}

pub const DEFAULT_PROJECTOR_COUNTS: [usize; 4] = [2, 3, 5, 8];
pub const DEFAULT_PSEUDO_COUNTS: [usize; 3] = [64, 256, 1024];

fn sweep(
    base: &RunConfig,
    seeds: &[u64],
    parameter: &str,
    values: &[usize],
    set: impl Fn(&mut RunConfig, usize),
    jobs: usize,
) -> std::result::Result<Sweep, Box<RunFailure>> {
    let mut configs = Vec::new();
    for &v in values {
        for &s in seeds {
            let mut c = for_seed(base, s);
            set(&mut c, v);
            configs.push(c);
        }
    }
    let reports = run_all(&configs, jobs)?;
    let points: Vec<SweepPoint> = values
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&value, chunk)| {
            let last_a: Vec<f64> = chunk.iter().map(|r| r.headline().last_a).collect();
            SweepPoint { value, mean_last_a: mean(&last_a), last_a }
        })
        .collect();
    let best = points.iter().map(|p| p.mean_last_a).fold(f64::NEG_INFINITY, f64::max);
    let worst = points.iter().map(|p| p.mean_last_a).fold(f64::INFINITY, f64::min);
    Ok(Sweep { parameter: parameter.into(), points, spread: best - worst })
}

/// Sweeps the projector count and the pseudo-feature count, one at a time,
/// around `base`.
pub fn run_sensitivity(
    base: &RunConfig,
    seeds: &[u64],
    projector_counts: &[usize],
    pseudo_counts: &[usize],
    jobs: usize,
) -> std::result::Result<SensitivityReport, Box<RunFailure>> {
    if seeds.is_empty() {
        return Err(CilError::Config("at least one seed is required".into()).into());
    }
    let mut sweeps = Vec::new();
    if !projector_counts.is_empty() {
        sweeps.push(sweep(base, seeds, "num_projectors", projector_counts, |c, v| c.train.num_projectors = v, jobs)?);
    }
    if !pseudo_counts.is_empty() {
        sweeps.push(sweep(base, seeds, "pseudo_per_class", pseudo_counts, |c, v| c.train.pseudo_per_class = v, jobs)?);
    }
    Ok(SensitivityReport { strategy: base.strategies[0], seeds: seeds.to_vec(), sweeps })
}
